"""Dynamic SABR: implied-vol asymptotics with time-dependent vol-of-vol
and correlation on a fixed daily grid."""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from .base import ParamBlock, Representation, SkInputs
from .bsm import VOL_FLOOR, bsm_price, smooth_floor

__all__ = [
    "N_GRID",
    "sabr_time_functions",
    "sabr_implied_vol",
    "sabr_price",
    "quadrature_weights",
    "SABR",
]

N_GRID = 360
_DT = 1.0 / N_GRID
_NODES = np.arange(N_GRID + 1) * _DT

# G_i = trapezoid integral of nodes 0..i; column i of this matrix holds the weights
_CUMTRAPZ = np.zeros((N_GRID + 1, N_GRID + 1))
for _i in range(1, N_GRID + 1):
    _CUMTRAPZ[:_i + 1, _i] = _DT
    _CUMTRAPZ[0, _i] = _CUMTRAPZ[_i, _i] = 0.5 * _DT


def quadrature_weights(T) -> np.ndarray:
    """Trapezoid weights on the nodes ``t_0..t_k`` (``t_k <= T``) plus the end
    point ``T``, for integrands that vanish at ``T``; shape ``(n, 361)``."""
    T = np.atleast_1d(np.asarray(T, dtype=float))
    if np.any(T <= 0) or np.any(T > 1.0 + 1e-12):
        raise ValueError("SABR maturities must lie in (0, 1]")
    k = np.minimum(np.floor(T * N_GRID + 1e-9).astype(int), N_GRID)
    w = np.zeros((T.size, N_GRID + 1))
    idx = np.arange(N_GRID + 1)
    full = idx[None, :] < k[:, None]
    w[full] = _DT
    w[:, 0] = 0.5 * _DT
    rows = np.arange(T.size)
    tail = np.maximum(T - k * _DT, 0.0)
    # last node: half its left segment plus half the partial segment up to T
    w[rows, k] = 0.5 * np.where(k > 0, _DT, 0.0) + 0.5 * tail
    w[rows[k == 0], 0] = 0.5 * tail[k == 0]
    return w


def _with_origin(grid):
    """Prepend a node at t=0 holding the first grid value."""
    return ad.concatenate([grid[..., 0:1], grid], axis=-1)


def _taped_weights(T):
    """Quadrature weights and lags ``T - t_i`` with ``T`` kept on the tape.

    Which nodes are active is fixed by the value of ``T``; inside a grid
    segment both arrays are affine in ``T``, so maturity derivatives are exact.
    """
    Tv = np.atleast_1d(np.asarray(ad.value(T), dtype=float))
    w0 = quadrature_weights(Tv)
    k = np.minimum(np.floor(Tv * N_GRID + 1e-9).astype(int), N_GRID)
    rows = np.arange(Tv.size)
    tail_v = np.maximum(Tv - k * _DT, 0.0)
    w0[rows, k] -= 0.5 * tail_v
    last = np.zeros_like(w0)
    last[rows, k] = 0.5
    active = (np.arange(N_GRID + 1)[None, :] <= k[:, None]).astype(float)
    Tc = ad.reshape(T, (-1, 1))
    tail = ad.sub(Tc, (k * _DT)[:, None])
    w = ad.add(w0, ad.mul(last, tail))
    lag = ad.mul(ad.sub(Tc, _NODES[None, :]), active)
    return w, lag, ad.reshape(Tc, (-1,))


def sabr_time_functions(nu_grid, rho_grid, T):
    """``(v1^2, v2^2, eta1, eta2)`` at maturities ``T`` (shape ``(n,)``).

    ``nu_grid``/``rho_grid`` hold the values at ``t_i = i/360``, either one
    shared grid ``(360,)`` or per-sample ``(n, 360)``. ``T`` may be taped.
    """
    if not isinstance(T, ad.Var):
        T = np.atleast_1d(np.asarray(T, dtype=float))
    w, lag, T = _taped_weights(T)
    nu = _with_origin(nu_grid)
    nr = ad.mul(nu, _with_origin(rho_grid))
    nu2 = ad.square(nu)
    T2 = ad.square(T)
    T3 = ad.mul(T2, T)
    wl = ad.mul(w, lag)
    v1sq = ad.div(ad.mul(ad.vsum(ad.mul(nu2, ad.mul(wl, lag)), axis=-1), 3.0), T3)
    v2sq = ad.div(ad.mul(ad.vsum(ad.mul(nu2, ad.mul(wl, _NODES[None, :])), axis=-1), 6.0), T3)
    eta1 = ad.div(ad.mul(ad.vsum(ad.mul(nr, wl), axis=-1), 2.0), T2)
    nr2 = nr if np.ndim(ad.value(nr)) == 2 else ad.reshape(nr, (1, -1))
    G = ad.matmul(nr2, _CUMTRAPZ)
    # inner double integral collapses to int_0^T (T - s) G(s)^2 ds
    eta2 = ad.div(ad.mul(ad.vsum(ad.mul(ad.square(G), wl), axis=-1), 12.0), ad.square(T2))
    return v1sq, v2sq, eta1, eta2


def sabr_implied_vol(x: SkInputs, alpha, beta, nu_grid, rho_grid):
    """Unfloored SABR implied volatility for each option in ``x``."""
    v1sq, v2sq, eta1, eta2 = sabr_time_functions(nu_grid, rho_grid, x.tau)
    T = x.tau
    log_f = ad.add(ad.log(x.S), ad.mul(x.r, T))
    one_b = ad.sub(1.0, beta)
    w = ad.div(ad.exp(ad.mul(one_b, log_f)), alpha)
    lk = ad.sub(ad.log(x.K), log_f)
    ob2 = ad.square(one_b)
    a1 = ad.add(ad.mul(ad.sub(beta, 1.0), 0.5), ad.mul(ad.mul(eta1, w), 0.5))
    w2 = ad.square(w)
    a2 = ad.add(
        ad.add(ad.div(ob2, 12.0), ad.div(ad.sub(one_b, ad.mul(eta1, w)), 4.0)),
        ad.mul(
            ad.div(ad.add(ad.mul(4.0, v1sq), ad.mul(3.0, ad.add(ad.square(eta2), ad.mul(3.0, ad.square(eta1))))), 24.0),
            w2,
        ),
    )
    b_inner = ad.add(
        ad.add(ad.div(ob2, 24.0), ad.div(ad.mul(ad.mul(w, beta), eta1), 4.0)),
        ad.div(ad.sub(ad.mul(2.0, v2sq), ad.mul(ad.mul(3.0, ad.square(eta2)), w2)), 24.0),
    )
    b = ad.div(b_inner, w2)
    poly = ad.add(ad.add(ad.add(1.0, ad.mul(a1, lk)), ad.mul(a2, ad.square(lk))), ad.mul(b, T))
    return ad.div(poly, w)


def sabr_price(x: SkInputs, alpha, beta, nu_grid, rho_grid, floor: float = VOL_FLOOR):
    return bsm_price(x, smooth_floor(sabr_implied_vol(x, alpha, beta, nu_grid, rho_grid), floor))


class SABR(Representation):
    """alpha, beta and 360-point grids of vol-of-vol and correlation (722)."""

    name = "SABR"

    def __init__(self, spot_scale: float = 1.0, beta_init: float = 0.9, vol_init: float = 0.2,
                 nu_init: float = 0.3, rho_init: float = -0.3, floor: float = VOL_FLOOR):
        self.floor = floor
        self.floor_hits = 0
        self.spot_scale = float(spot_scale)
        # alpha chosen so that 1/w is close to vol_init at the typical forward
        alpha_init = vol_init * float(spot_scale) ** (1.0 - beta_init)
        self.blocks = (
            ParamBlock("alpha", "positive", 1, alpha_init),
            ParamBlock("beta", "prob", 1, beta_init),
            ParamBlock("nu", "positive", N_GRID, nu_init),
            ParamBlock("rho", "corr", N_GRID, rho_init),
        )

    def split(self, phi):
        return phi[..., 0], phi[..., 1], phi[..., 2 : 2 + N_GRID], phi[..., 2 + N_GRID :]

    def price(self, x, phi):
        vol = sabr_implied_vol(x, *self.split(phi))
        self.floor_hits += int(np.sum(np.asarray(ad.value(vol)) < self.floor))
        return bsm_price(x, smooth_floor(vol, self.floor))
