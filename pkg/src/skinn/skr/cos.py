"""Heston and Heston-with-double-exponential-jumps priced by Fourier-cosine
(COS) expansion of the log-moneyness density."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from .base import ParamBlock, Representation, SkInputs, column

__all__ = [
    "CosConfig",
    "heston_cf",
    "jump_cf",
    "heston_cumulants",
    "jump_cumulants",
    "interval_from_cumulants",
    "cos_interval",
    "cos_chi",
    "cos_psi",
    "cos_payoff_coeffs",
    "cos_price",
    "HSV",
    "HSVJ",
    "HESTON_NAMES",
    "JUMP_NAMES",
]

HESTON_NAMES = ("v_theta", "v0", "sigma_v", "rho", "kappa")
JUMP_NAMES = ("p", "eta1", "eta2", "lambda")


@dataclass(frozen=True)
class CosConfig:
    N: int = 256
    L: float = 12.0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("COS needs at least one term")
        if self.L <= 0:
            raise ValueError("truncation multiplier L must be positive")


def _col(v):
    """Per-option arrays become ``(n, 1)`` so they broadcast over terms."""
    return ad.reshape(v, (-1, 1)) if np.ndim(ad.value(v)) == 1 else v


# ---------------------------------------------------------------- char. fns


def _heston_exponent(u, tau, v_theta, v0, sigma_v, rho, kappa) -> ad.CVar:
    """``C v_theta + D v0`` of the Heston log-return CF (little-trap form).

    ``b - d`` is evaluated as ``-sigma_v^2 (iu + u^2) / (b + d)``, which is the
    same quantity without the cancellation that appears when ``sigma_v`` is
    small relative to ``kappa``.
    """
    s2 = ad.square(sigma_v)
    b = ad.CVar(kappa, ad.neg(ad.mul(ad.mul(rho, sigma_v), u)))
    q = ad.CVar(ad.square(u), u)  # iu + u^2
    d2 = ad.cadd(ad.cmul(b, b), ad.cmul(q, ad.CVar(s2, 0.0)))
    d = ad.csqrt(d2)
    bp = ad.cadd(b, d)
    bm = ad.cdiv(ad.cmul(q, ad.CVar(ad.neg(s2), 0.0)), bp)
    g = ad.cdiv(bm, bp)
    e = ad.cexp(ad.cmul(d, ad.CVar(ad.neg(tau), 0.0)))
    one_e = ad.csub(1.0, e)
    one_ge = ad.csub(1.0, ad.cmul(g, e))
    # log((1 - g e)/(1 - g)) = log1p(g (1 - e) / (1 - g))
    z = ad.cdiv(ad.cmul(g, one_e), ad.csub(1.0, g))
    k_s2 = ad.div(kappa, s2)
    q_over_bp = ad.cdiv(q, bp)
    c = ad.csub(
        ad.cmul(q_over_bp, ad.CVar(ad.neg(ad.mul(kappa, tau)), 0.0)),
        ad.cmul(ad.clog1p(z), ad.CVar(ad.mul(2.0, k_s2), 0.0)),
    )
    dd = ad.cmul(ad.neg(q_over_bp), ad.cdiv(one_e, one_ge))
    return ad.cadd(ad.cmul(c, ad.CVar(v_theta, 0.0)), ad.cmul(dd, ad.CVar(v0, 0.0)))


def _jump_exponent(u, tau, p, eta1, eta2, lam) -> ad.CVar:
    if np.any(np.asarray(ad.value(eta1)) <= 1.0):
        raise ad.DomainError("jump_cf: eta1 must exceed 1 for a finite expected jump")
    if np.any(np.asarray(ad.value(eta2)) <= 0.0):
        raise ad.DomainError("jump_cf: eta2 must be positive")
    u2 = ad.square(u)
    e1sq = ad.square(eta1)
    e2sq = ad.square(eta2)
    den1 = ad.add(e1sq, u2)
    den2 = ad.add(e2sq, u2)
    qp = ad.sub(1.0, p)
    re = ad.sub(ad.add(ad.div(ad.mul(p, e1sq), den1), ad.div(ad.mul(qp, e2sq), den2)), 1.0)
    im = ad.mul(ad.sub(ad.div(ad.mul(p, eta1), den1), ad.div(ad.mul(qp, eta2), den2)), u)
    lt = ad.mul(lam, tau)
    return ad.CVar(ad.mul(lt, re), ad.mul(lt, im))


def _jump_compensator(p, eta1, eta2):
    """``E[e^Y] - 1`` for the double-exponential jump size."""
    return ad.sub(
        ad.add(ad.div(ad.mul(p, eta1), ad.sub(eta1, 1.0)), ad.div(ad.mul(ad.sub(1.0, p), eta2), ad.add(eta2, 1.0))),
        1.0,
    )


def _safe_exp(z: ad.CVar, u) -> ad.CVar:
    re = np.asarray(ad.value(z.re))
    if np.any(re > 700):
        bad = np.broadcast_to(np.asarray(u, float), re.shape)[re > 700]
        raise ad.NonFiniteError(f"characteristic function overflows at u={float(bad.flat[0]):.6g}")
    return ad.cexp(z)


def heston_cf(u, x: SkInputs, phi) -> ad.CVar:
    """Heston CF of ``log S_T``: ``exp(C v_theta + D v0 + iu log(S e^{r tau}))``.

    ``phi`` is ``(v_theta, v0, sigma_v, rho, kappa)``.
    """
    u = np.asarray(u, dtype=float)
    vt, v0, sv, rho, kappa = (phi[..., j] for j in range(5))
    ex = _heston_exponent(u, x.tau, vt, v0, sv, rho, kappa)
    phase = ad.mul(u, ad.add(ad.log(x.S), ad.mul(x.r, x.tau)))
    return _safe_exp(ad.CVar(ex.re, ad.add(ex.im, phase)), u)


def jump_cf(u, p, eta1, eta2, lam, tau) -> ad.CVar:
    """``exp(lam tau (p eta1/(eta1 - iu) + (1 - p) eta2/(eta2 + iu) - 1))``."""
    u = np.asarray(u, dtype=float)
    return _safe_exp(_jump_exponent(u, tau, p, eta1, eta2, lam), u)


# ------------------------------------------------------------------ interval


def heston_cumulants(tau, v_theta, v0, sigma_v, rho, kappa):
    """First two cumulants of ``log(S_T / (S e^{r tau}))`` (closed form).

    The variance follows from ``int E[v_s] (1 - rho sigma_v a_s / kappa +
    sigma_v^2 a_s^2 / (4 kappa^2)) ds`` with ``a_s = 1 - e^{-kappa (tau - s)}``.
    Works on plain arrays or taped values.
    """
    t, vb, v, s, r, k = (a if isinstance(a, ad.Var) else np.asarray(a, dtype=float)
                         for a in (tau, v_theta, v0, sigma_v, rho, kappa))
    e1 = ad.exp(-k * t)
    e2 = e1 * e1
    c1 = (1 - e1) * (vb - v) / (2 * k) - 0.5 * vb * t
    j0 = vb * t + (v - vb) * (1 - e1) / k
    j1 = vb * (1 - e1) / k + (v - vb) * e1 * t
    j2 = vb * (1 - e2) / (2 * k) + (v - vb) * (e1 - e2) / k
    c2 = j0 - r * s / k * (j0 - j1) + s * s / (4 * k * k) * (j0 - 2 * j1 + j2)
    return c1, c2


def jump_cumulants(tau, p, eta1, eta2, lam):
    """Cumulants ``(c1, c2, c4)`` of the compound-Poisson jump part."""
    t, p, e1, e2, lam = (a if isinstance(a, ad.Var) else np.asarray(a, dtype=float)
                         for a in (tau, p, eta1, eta2, lam))
    lt = lam * t
    m1 = p / e1 - (1 - p) / e2
    m2 = 2 * p / ad.square(e1) + 2 * (1 - p) / ad.square(e2)
    m4 = 24 * p / ad.square(ad.square(e1)) + 24 * (1 - p) / ad.square(ad.square(e2))
    return lt * m1, lt * m2, lt * m4


def interval_from_cumulants(c1, c2, c4=0.0, L: float = 12.0):
    """``c1 -/+ L sqrt(c2 + sqrt(c4))``; the ``c4`` term is skipped when it is zero."""
    if np.any(np.asarray(ad.value(c2)) <= 0):
        raise ValueError("second cumulant must be positive to size the COS interval")
    if isinstance(c4, ad.Var) or np.any(np.asarray(c4) != 0):
        c2 = c2 + ad.sqrt(c4)
    half = L * ad.sqrt(c2)
    return c1 - half, c1 + half


def cos_interval(x: SkInputs, phi, L: float = 12.0, jumps: bool = False, compensate: bool = False):
    """Truncation range ``(a, b)`` for ``log(S_T / K)``.

    The bounds are recorded on the tape when ``phi`` or the inputs are, so the
    derivative of a COS price is that of the function actually evaluated.
    """
    S, K, r, tau = x.S, x.K, x.r, x.tau
    c1, c2 = heston_cumulants(tau, *(phi[..., j] for j in range(5)))
    c1 = c1 + ad.log(ad.div(S, K)) + r * tau
    c4 = 0.0
    if jumps:
        j1, j2, j4 = jump_cumulants(tau, *(phi[..., 5 + j] for j in range(4)))
        c1, c2, c4 = c1 + j1, c2 + j2, j4
        if compensate:
            c1 = c1 - phi[..., 8] * tau * _jump_compensator(phi[..., 5], phi[..., 6], phi[..., 7])
    return interval_from_cumulants(c1, c2, c4, L)


# -------------------------------------------------------------- coefficients


def _trail(v):
    """Append a unit axis so per-option values broadcast over the terms."""
    if not isinstance(v, ad.Var):
        v = np.asarray(v, dtype=float)
    return ad.reshape(v, np.shape(ad.value(v)) + (1,))


def cos_chi(c, d, a, b, N: int):
    """``int_c^d e^y cos(w pi (y - a)/(b - a)) dy`` for ``w = 0..N-1``."""
    a, b, c, d = (_trail(v) for v in (a, b, c, d))
    u = np.arange(N) * np.pi / (b - a)
    ed, ec = ad.exp(d), ad.exp(c)
    return (
        ad.cos(u * (d - a)) * ed
        - ad.cos(u * (c - a)) * ec
        + u * (ad.sin(u * (d - a)) * ed - ad.sin(u * (c - a)) * ec)
    ) / (1.0 + u * u)


def cos_psi(c, d, a, b, N: int):
    """``int_c^d cos(w pi (y - a)/(b - a)) dy`` for ``w = 0..N-1``."""
    a, b, c, d = (_trail(v) for v in (a, b, c, d))
    w = np.arange(N)
    u = w * np.pi / (b - a)
    safe = ad.where(w == 0, 1.0, u)
    out = (ad.sin(u * (d - a)) - ad.sin(u * (c - a))) / safe
    return ad.where(w == 0, (d - c) * np.ones(N), out)


def cos_payoff_coeffs(a, b, N: int, K=1.0):
    """Call payoff coefficients ``V_w`` in log-moneyness; shape ``(..., N)``."""
    if N < 1:
        raise ValueError("COS needs at least one term")
    av = np.asarray(ad.value(a), dtype=float)
    bv = np.asarray(ad.value(b), dtype=float)
    if np.any(av >= 0) or np.any(bv <= 0):
        raise ValueError("COS interval must straddle zero (a < 0 < b)")
    zero = np.zeros_like(av)
    v = 2.0 / (_trail(b) - _trail(a)) * (cos_chi(zero, b, a, b, N) - cos_psi(zero, b, a, b, N))
    return v * _trail(K) if np.ndim(ad.value(K)) else v * K


# ------------------------------------------------------------------- pricing


def cos_price(x: SkInputs, phi, jumps: bool = False, cos: CosConfig = CosConfig(), compensate: bool = False):
    """COS call price under Heston (``jumps=False``) or Heston + jumps.

    ``phi`` holds ``(v_theta, v0, sigma_v, rho, kappa[, p, eta1, eta2, lambda])``
    as a shared vector or one row per option.
    """
    S, K, r, tau = x.S, x.K, x.r, x.tau
    n = len(x)
    a, b = cos_interval(x, phi, cos.L, jumps, compensate)
    a = ad.add(np.zeros(n), a)
    b = ad.add(np.zeros(n), b)
    u = np.arange(cos.N)[None, :] * np.pi / _trail(b - a)
    half_first = np.ones(cos.N)
    half_first[0] = 0.5
    V = cos_payoff_coeffs(a, b, cos.N) * half_first
    tc = _col(tau) if np.ndim(ad.value(tau)) else tau
    p = [column(phi, j, trailing=1) for j in range(9 if jumps else 5)]
    ex = _heston_exponent(u, tc, *p[:5])
    if jumps:
        ex = ad.cadd(ex, _jump_exponent(u, tc, *p[5:9]))
    drift = ad.add(ad.log(ad.div(S, K)), ad.mul(r, tau))
    if jumps and compensate:
        drift = ad.sub(drift, ad.mul(ad.mul(phi[..., 8], tau), _jump_compensator(phi[..., 5], phi[..., 6], phi[..., 7])))
    drift = _col(drift) if np.ndim(ad.value(drift)) else drift
    if np.any(np.asarray(ad.value(ex.re)) > 700):
        raise ad.NonFiniteError("characteristic function overflows inside the COS sum")
    # Re{psi(u) e^{-iua}} = e^{Re} cos(Im + u (drift - a))
    angle = ad.add(ex.im, ad.mul(u, ad.sub(drift, _trail(a))))
    terms = ad.mul(ad.exp(ex.re), ad.cos(angle))
    series = ad.vsum(ad.mul(terms, V), axis=-1)
    return ad.mul(ad.mul(K, ad.exp(ad.neg(ad.mul(r, tau)))), series)


class HSV(Representation):
    """Heston stochastic volatility: v_theta, v0, sigma_v, rho, kappa."""

    name = "HSV"
    jumps = False

    def __init__(self, v_theta=0.04, v0=0.04, sigma_v=0.5, rho=-0.5, kappa=2.0, cos: CosConfig = CosConfig()):
        self.cos = cos
        self.blocks = (
            ParamBlock("v_theta", "positive", 1, v_theta),
            ParamBlock("v0", "positive", 1, v0),
            ParamBlock("sigma_v", "positive", 1, sigma_v),
            ParamBlock("rho", "corr", 1, rho),
            ParamBlock("kappa", "positive", 1, kappa),
        )

    def price(self, x, phi):
        return cos_price(x, phi, False, self.cos)


class HSVJ(HSV):
    """Heston plus double-exponential jumps: adds p, eta1, eta2, lambda."""

    name = "HSVJ"
    jumps = True

    def __init__(self, p=0.4, eta1=10.0, eta2=5.0, lam=0.5, compensate: bool = False, **heston):
        super().__init__(**heston)
        self.compensate = compensate
        self.blocks = self.blocks + (
            ParamBlock("p", "prob", 1, p),
            ParamBlock("eta1", "gt1", 1, eta1),
            ParamBlock("eta2", "positive", 1, eta2),
            ParamBlock("lambda", "positive", 1, lam),
        )

    def price(self, x, phi):
        return cos_price(x, phi, True, self.cos, self.compensate)
