"""Sandwich inference for the fitted structured-knowledge parameters.

With ``L(x) = (1/N) sum_i q_i(x)`` over the ``N`` observations, the
asymptotic covariance of ``sqrt(N) (x_hat - x0)`` is ``H^-1 Xi H^-1`` where
``H`` is the Hessian of ``L`` and ``Xi`` the mean outer product of the
per-observation scores ``grad q_i``. Collocation points and boundary pairs are
held fixed, so their contribution enters every ``q_i`` as a common term.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import stats

from . import autodiff as ad
from .data import Panel
from .trainer import CollocationSet, FittedModel, _Problem, network

__all__ = [
    "SandwichEstimate",
    "ModelObjective",
    "hessian_fd",
    "sandwich_core",
    "score_outer_product",
    "empirical_hessian",
    "sandwich",
    "confidence_interval",
    "z_value",
    "inference_report",
    "write_report",
]

COND_LIMIT = 1e12
RIDGE = 1e-8


@dataclass
class SandwichEstimate:
    H: np.ndarray
    Xi: np.ndarray
    V: np.ndarray
    H_inv: np.ndarray
    regularized: bool
    cond: float
    n: int
    phi_index: np.ndarray
    V_phi_raw: np.ndarray
    V_phi: np.ndarray | None = None
    asymmetry: float = 0.0

    def reconstruct(self) -> np.ndarray:
        return self.H_inv @ self.Xi @ self.H_inv.T


def hessian_fd(grad_fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> tuple[np.ndarray, float]:
    """Central differences of an exact gradient, ``h_j = 1e-4 (1 + |x_j|)``.

    Returns the symmetrised Hessian and the largest asymmetry seen before
    symmetrising.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    H = np.empty((n, n))
    for j in range(n):
        h = 1e-4 * (1.0 + abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        col = (np.asarray(grad_fn(xp)) - np.asarray(grad_fn(xm))) / (2.0 * h)
        if not np.all(np.isfinite(col)):
            raise FloatingPointError(f"non-finite Hessian entries in column {j}")
        H[:, j] = col
    asym = float(np.max(np.abs(H - H.T))) if n else 0.0
    return 0.5 * (H + H.T), asym


def sandwich_core(H: np.ndarray, scores: np.ndarray) -> tuple:
    """``(V, H_inv, Xi, regularized, cond)`` from a Hessian and the ``(N, P)``
    score matrix."""
    scores = np.atleast_2d(scores)
    Xi = scores.T @ scores / scores.shape[0]
    cond = float(np.linalg.cond(H)) if H.size else 1.0
    regularized = not np.isfinite(cond) or cond > COND_LIMIT
    Hr = H + RIDGE * np.eye(H.shape[0]) if regularized else H
    try:
        H_inv = np.linalg.inv(Hr)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("Hessian is singular even after regularisation") from exc
    if not np.all(np.isfinite(H_inv)):
        raise np.linalg.LinAlgError("Hessian is singular even after regularisation")
    V = H_inv @ Xi @ H_inv.T
    V = 0.5 * (V + V.T)
    return V, H_inv, Xi, regularized, cond


class ModelObjective:
    """The training objective of a fitted model as a function of the
    stacked vector ``x = (theta, raw phi)``."""

    def __init__(self, model: FittedModel, panel: Panel, colloc: CollocationSet | None = None):
        self.model = model
        self.prob = _Problem(model.config, panel, model.rep, colloc)
        self.p = model.theta.flat.size
        self.q = model.phi_raw.size
        self.x_hat = np.concatenate([model.theta.flat, model.phi_raw])
        self.N = self.prob.n_obs

    def _split(self, tape, x):
        tv = tape.lift(x[: self.p])
        pv = tape.lift(x[self.p :]) if self.q else x[self.p :]
        return tv, pv

    def value(self, x) -> float:
        _, _, tot = self.prob.losses(x[: self.p], x[self.p :], need_sk=False)
        return float(ad.value(tot))

    def grad(self, x) -> np.ndarray:
        tape = ad.Tape()
        tv, pv = self._split(tape, x)
        _, _, tot = self.prob.losses(tv, pv, need_sk=False)
        wrt = [tv] + ([pv] if self.q else [])
        return np.concatenate([np.ravel(g) for g in ad.grad(tot, wrt)])

    def common_grad(self, x) -> np.ndarray:
        """Gradient of the part shared by every observation: boundary pairs
        and the collocation penalty."""
        pr = self.prob
        tape = ad.Tape()
        tv, pv = self._split(tape, x)
        terms = []
        nb = pr.nd - pr.n_obs
        if nb:
            fb = network(tv, pr.mlp, pr.Xd[pr.n_obs :])
            terms.append(ad.div(ad.vsum(ad.square(ad.sub(fb, pr.yd[pr.n_obs :]))), pr.nd))
        if pr.use_sk and pr.lam > 0:
            fc = network(tv, pr.mlp, pr.Xc)
            terms.append(ad.mul(pr.lam, ad.vmean(ad.square(ad.sub(fc, pr.g_colloc(pv))))))
        if not terms:
            return np.zeros(self.p + self.q)
        tot = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
        wrt = [tv] + ([pv] if self.q else [])
        return np.concatenate([np.ravel(g) for g in ad.grad(tot, wrt)])

    def scores(self, x=None) -> np.ndarray:
        """Per-observation score rows ``grad q_i``, shape ``(N, P)``."""
        x = self.x_hat if x is None else np.asarray(x, float)
        pr = self.prob
        N = self.N
        tape = ad.Tape()
        theta_rows = tape.lift(np.tile(x[: self.p], (N, 1)))
        pred = network(theta_rows, pr.mlp, pr.Xd[:N])
        loss_rows = ad.square(ad.sub(pred, pr.yd[:N]))
        (g_theta,) = ad.grad(ad.vsum(loss_rows), [theta_rows])
        S = np.zeros((N, self.p + self.q))
        S[:, : self.p] = np.asarray(g_theta) / pr.nd * N
        return S + self.common_grad(x)[None, :]


def score_outer_product(model: FittedModel, panel: Panel, colloc: CollocationSet | None = None) -> np.ndarray:
    s = ModelObjective(model, panel, colloc).scores()
    return s.T @ s / s.shape[0]


def empirical_hessian(model: FittedModel, panel: Panel, colloc: CollocationSet | None = None) -> np.ndarray:
    obj = ModelObjective(model, panel, colloc)
    return hessian_fd(obj.grad, obj.x_hat)[0]


def _phi_jacobian(rep, raw: np.ndarray) -> np.ndarray:
    q = raw.size
    J = np.empty((q, q))
    tape = ad.Tape()
    rv = tape.lift(raw)
    out = rep.constrain(rv)
    for j in range(q):
        (J[j],) = ad.grad(out[j], [rv])
    return J


def sandwich(model: FittedModel, panel: Panel, colloc: CollocationSet | None = None) -> SandwichEstimate:
    """Full sandwich over ``(theta, raw phi)`` plus the constrained ``phi``
    block via the delta method."""
    obj = ModelObjective(model, panel, colloc)
    H, asym = hessian_fd(obj.grad, obj.x_hat)
    V, H_inv, Xi, reg, cond = sandwich_core(H, obj.scores())
    idx = np.arange(obj.p, obj.p + obj.q)
    V_raw = V[np.ix_(idx, idx)]
    V_phi = None
    if model.rep is not None and obj.q:
        J = _phi_jacobian(model.rep, model.phi_raw)
        V_phi = J @ V_raw @ J.T
        V_phi = 0.5 * (V_phi + V_phi.T)
    return SandwichEstimate(H, Xi, V, H_inv, reg, cond, obj.N, idx, V_raw, V_phi, asym)


def z_value(alpha: float) -> float:
    return float(stats.norm.ppf(1.0 - alpha / 2.0))


def confidence_interval(phi_hat, V_phi, N: int, alpha: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Wald interval ``phi_j -/+ z sqrt(V_jj / N)`` (not clipped to the
    parameter domain)."""
    phi_hat = np.atleast_1d(np.asarray(phi_hat, dtype=float))
    d = np.atleast_1d(np.diag(np.atleast_2d(V_phi))).astype(float)
    if np.any(d < -1e-15):
        raise ValueError("covariance diagonal must be non-negative")
    half = z_value(alpha) * np.sqrt(np.maximum(d, 0.0) / N)
    return phi_hat - half, phi_hat + half


def inference_report(model: FittedModel, panel: Panel, alpha: float = 0.05,
                     colloc: CollocationSet | None = None) -> tuple[list[dict], SandwichEstimate]:
    est = sandwich(model, panel, colloc)
    if est.V_phi is None:
        return [], est
    phi = model.phi
    lo, hi = confidence_interval(phi, est.V_phi, est.n, alpha)
    se = np.sqrt(np.maximum(np.diag(est.V_phi), 0.0) / est.n)
    rows = [
        {"parameter": name, "estimate": phi[j], "std_error": se[j], "ci_lo": lo[j], "ci_hi": hi[j],
         "regularized": int(est.regularized)}
        for j, name in enumerate(model.rep.param_names())
    ]
    return rows, est


def write_report(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["parameter", "estimate", "std_error", "ci_lo", "ci_hi", "regularized"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r["parameter"]] + [repr(float(r[c])) for c in cols[1:-1]] + [r["regularized"]])
