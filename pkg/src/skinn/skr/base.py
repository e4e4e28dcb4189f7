"""Shared plumbing for structured-knowledge representations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad

__all__ = ["SkInputs", "ParamBlock", "Representation", "param_transform", "positive", "LOG2"]

LOG2 = float(np.log(2.0))


@dataclass
class SkInputs:
    """Observable pricing inputs; each field is a number, array or taped Var.

    ``S`` spot, ``K`` strike, ``r`` continuously compounded rate (1/yr),
    ``tau`` time to maturity (yr).
    """

    S: object
    K: object
    r: object
    tau: object

    def __post_init__(self):
        s, k, t = (np.asarray(ad.value(v), dtype=float) for v in (self.S, self.K, self.tau))
        if np.any(s <= 0) or np.any(k <= 0):
            raise ValueError("spot and strike must be positive")
        if np.any(t <= 0):
            raise ValueError("time to maturity must be positive (expired options are intrinsic)")

    @property
    def m(self):
        return ad.div(self.K, self.S)

    @classmethod
    def from_moneyness(cls, m, tau, r, S=1.0) -> "SkInputs":
        m = np.asarray(m, dtype=float)
        return cls(S=np.broadcast_to(np.asarray(S, float), m.shape).copy(), K=S * m, r=r, tau=tau)

    def __len__(self) -> int:
        return int(np.size(np.broadcast_arrays(*(np.asarray(ad.value(v)) for v in
                                                   (self.S, self.K, self.r, self.tau)))[0]))

    def take(self, idx) -> "SkInputs":
        vals = [np.asarray(ad.value(v), dtype=float) for v in (self.S, self.K, self.r, self.tau)]
        vals = np.broadcast_arrays(*vals)
        return SkInputs(*(np.asarray(v)[idx] for v in vals))


# tanh rounds to exactly +-1 beyond |raw| ~ 19; the shrink keeps |rho| < 1
CORR_SHRINK = 1.0 - 1e-12


def positive(raw, scale=1.0):
    """Softplus map; ``raw = 0`` lands on ``scale`` (``log 2`` when unscaled)."""
    sp = ad.softplus(raw)
    return sp if scale is None else ad.mul(sp, scale / LOG2)


@dataclass(frozen=True)
class ParamBlock:
    """A contiguous run of parameters sharing one constraint.

    kinds: ``positive`` (softplus, init * softplus(raw)/log 2), ``corr``
    (tanh), ``prob`` (sigmoid), ``gt1`` (1 + softplus), ``free`` (shift),
    ``simplex`` (row-wise softmax over rows of length ``row``), ``box``
    (sigmoid onto ``(lo, hi)``).
    """

    name: str
    kind: str
    size: int = 1
    init: float = 0.0
    row: int = 0
    lo: float = 0.0
    hi: float = 1.0

    def forward(self, raw):
        k, c = self.kind, self.init
        if k == "positive":
            return ad.mul(ad.softplus(raw), c / LOG2)
        if k == "corr":
            return ad.mul(ad.tanh(ad.add(raw, np.arctanh(c / CORR_SHRINK))), CORR_SHRINK)
        if k == "prob":
            return ad.sigmoid(ad.add(raw, np.log(c / (1.0 - c))))
        if k == "gt1":
            return ad.add(1.0, ad.mul(ad.softplus(raw), (c - 1.0) / LOG2))
        if k == "free":
            return ad.add(raw, c)
        if k == "box":
            u = (c - self.lo) / (self.hi - self.lo)
            return ad.add(self.lo, ad.mul(ad.sigmoid(ad.add(raw, np.log(u / (1.0 - u)))), self.hi - self.lo))
        if k == "simplex":
            shape = np.shape(ad.value(raw))
            rows = ad.reshape(raw, shape[:-1] + (self.size // self.row, self.row))
            return ad.reshape(ad.softmax(rows, axis=-1), shape)
        raise ValueError(f"unknown constraint kind {k!r}")

    def inverse(self, val):
        val = np.asarray(val, dtype=float)
        k, c = self.kind, self.init
        if k == "positive":
            y = val * LOG2 / c
            return np.where(y > 30, y, np.log(np.expm1(np.minimum(y, 30))))
        if k == "corr":
            return np.arctanh(val / CORR_SHRINK) - np.arctanh(c / CORR_SHRINK)
        if k == "prob":
            return np.log(val / (1 - val)) - np.log(c / (1 - c))
        if k == "gt1":
            y = (val - 1.0) * LOG2 / (c - 1.0)
            return np.where(y > 30, y, np.log(np.expm1(np.minimum(y, 30))))
        if k == "free":
            return val - c
        if k == "box":
            u = (c - self.lo) / (self.hi - self.lo)
            v = (val - self.lo) / (self.hi - self.lo)
            return np.log(v / (1 - v)) - np.log(u / (1 - u))
        if k == "simplex":
            rows = np.log(val.reshape(val.shape[:-1] + (self.size // self.row, self.row)))
            return (rows - rows.mean(axis=-1, keepdims=True)).reshape(val.shape)
        raise ValueError(f"unknown constraint kind {k!r}")


class Representation:
    """Base class: a differentiable pricing map ``g_phi(X_SK)``.

    Subclasses define ``name``, ``blocks`` and ``price(x, phi)`` where ``phi``
    is the constrained parameter array of shape ``(dim,)`` or a per-sample
    stack ``(n, dim)``.
    """

    name = "base"
    blocks: tuple[ParamBlock, ...] = ()

    @property
    def dim(self) -> int:
        return sum(b.size for b in self.blocks)

    def param_names(self) -> list[str]:
        names = []
        for b in self.blocks:
            names += [b.name] if b.size == 1 else [f"{b.name}[{i}]" for i in range(b.size)]
        return names

    def init_raw(self) -> np.ndarray:
        return np.zeros(self.dim)

    def constrain(self, raw):
        shape = np.shape(ad.value(raw))
        if self.dim == 0 and (not shape or shape[-1] == 0):
            return raw
        if not shape or shape[-1] != self.dim:
            raise ValueError(f"{self.name}: expected {self.dim} raw parameters, got shape {shape}")
        parts, off = [], 0
        for b in self.blocks:
            parts.append(b.forward(raw[..., off : off + b.size]))
            off += b.size
        return parts[0] if len(parts) == 1 else ad.concatenate(parts, axis=-1)

    def unconstrain(self, phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        parts, off = [], 0
        for b in self.blocks:
            parts.append(np.atleast_1d(b.inverse(phi[..., off : off + b.size])))
            off += b.size
        return np.concatenate(parts, axis=-1)

    def price(self, x: SkInputs, phi):
        raise NotImplementedError

    def __call__(self, x: SkInputs, phi):
        return self.price(x, phi)


def param_transform(raw, repr_id: str):
    """Constrained view of ``raw`` for the named representation."""
    from . import get_representation

    return get_representation(repr_id).constrain(raw)


def column(phi, j: int, trailing: int = 0):
    """Parameter ``j``; per-sample columns get ``trailing`` unit axes for
    broadcasting against option-by-term arrays."""
    c = phi[..., j]
    if trailing and np.ndim(ad.value(c)) == 1:
        c = ad.reshape(c, (-1,) + (1,) * trailing)
    return c
