"""Martingale option pricing approach: a learnable risk-neutral probability
matrix over a (tenor x terminal-price state) grid."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from .base import ParamBlock, Representation, SkInputs

__all__ = ["MopaGrid", "snap_tenor", "mopa_price", "MOPA"]


@dataclass(frozen=True)
class MopaGrid:
    """``s`` tenors and ``q`` states spaced on ``[lo * S, hi * S]``."""

    tenors: tuple = field(default_factory=lambda: tuple(np.round(np.arange(1, 11) * 0.1, 10)))
    q: int = 200
    lo: float = 0.5
    hi: float = 1.5

    @property
    def s(self) -> int:
        return len(self.tenors)

    def rel_states(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.q)

    def states(self, S) -> np.ndarray:
        return np.asarray(S, dtype=float)[..., None] * self.rel_states()


def snap_tenor(tau, grid: MopaGrid) -> np.ndarray:
    """Index of the nearest grid tenor; maturities beyond half a spacing past
    the last tenor (or non-positive) are rejected."""
    tau = np.atleast_1d(np.asarray(ad.value(tau), dtype=float))
    t = np.asarray(grid.tenors, dtype=float)
    upper = t[-1] + 0.5 * (t[-1] - t[-2] if t.size > 1 else t[-1])
    if np.any(tau <= 0) or np.any(tau > upper):
        raise ValueError(f"maturity outside the MOPA tenor grid (0, {upper:g}]")
    return np.abs(tau[:, None] - t[None, :]).argmin(axis=1)


def mopa_price(x: SkInputs, grid: MopaGrid, Q):
    """``exp(-r tau_h) sum_i (S_i - K)^+ Q[h, i]`` for each option.

    ``Q`` holds softmaxed rows, flat ``(s*q,)`` or ``(s, q)``, or per-sample
    ``(n, s*q)``. The option's own ``tau`` is replaced by its snapped tenor.
    """
    n = len(x)
    h = snap_tenor(np.broadcast_to(np.asarray(ad.value(x.tau), float), (n,)), grid)
    tau_h = np.asarray(grid.tenors, dtype=float)[h]
    qv = ad.value(Q)
    if np.ndim(qv) == 2 and np.shape(qv) == (grid.s, grid.q):
        Q = ad.reshape(Q, (grid.s * grid.q,))
        qv = ad.value(Q)
    if np.ndim(qv) == 1:
        rows = ad.getitem(ad.reshape(Q, (grid.s, grid.q)), h)
    else:
        rows = ad.getitem(ad.reshape(Q, (n, grid.s, grid.q)), (np.arange(n), h))
    S = x.S if np.ndim(ad.value(x.S)) else ad.mul(x.S, np.ones(n))
    K = x.K if np.ndim(ad.value(x.K)) else ad.mul(x.K, np.ones(n))
    states = ad.mul(ad.reshape(S, (-1, 1)), grid.rel_states()[None, :])
    payoff = ad.max0(ad.sub(states, ad.reshape(K, (-1, 1))))
    disc = ad.exp(ad.neg(ad.mul(x.r, tau_h)))
    return ad.mul(disc, ad.vsum(ad.mul(payoff, rows), axis=-1))


class MOPA(Representation):
    """Non-parametric risk-neutral distribution: ``s x q`` softmaxed rows."""

    name = "MOPA"

    def __init__(self, grid: MopaGrid = MopaGrid()):
        self.grid = grid
        self.blocks = (ParamBlock("Q", "simplex", grid.s * grid.q, 0.0, row=grid.q),)

    def param_names(self) -> list[str]:
        return [f"Q[{t:g},{i}]" for t in self.grid.tenors for i in range(self.grid.q)]

    def price(self, x, phi):
        return mopa_price(x, self.grid, phi)
