"""Black-Scholes-Merton and the ad-hoc (ABSM) implied-vol polynomial."""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from .base import ParamBlock, Representation, SkInputs, column

__all__ = [
    "VOL_FLOOR",
    "bsm_price",
    "bsm_delta",
    "absm_vol",
    "absm_price",
    "smooth_floor",
    "BSM",
    "ABSM",
]

VOL_FLOOR = 1e-4
_FLOOR_SHARPNESS = 2.0e4


def smooth_floor(sigma, floor: float = VOL_FLOOR, k: float = _FLOOR_SHARPNESS):
    """``sigma + softplus(k (floor - sigma)) / k``.

    Differentiable and bit-identical to ``sigma`` once ``sigma`` is a few
    hundredths above the floor (the softplus underflows to zero).
    """
    return ad.add(sigma, ad.mul(ad.softplus(ad.mul(ad.sub(floor, sigma), k)), 1.0 / k))


def _d1_d2(x: SkInputs, sigma):
    sq = ad.mul(sigma, ad.sqrt(x.tau))
    num = ad.add(ad.log(ad.div(x.S, x.K)), ad.mul(ad.add(x.r, ad.mul(0.5, ad.square(sigma))), x.tau))
    d1 = ad.div(num, sq)
    return d1, ad.sub(d1, sq)


def bsm_price(x: SkInputs, sigma):
    """European call ``S N(d1) - K exp(-r tau) N(d2)``."""
    if np.any(np.asarray(ad.value(sigma)) <= 0):
        raise ad.DomainError("bsm_price: sigma must be positive")
    d1, d2 = _d1_d2(x, sigma)
    disc_k = ad.mul(x.K, ad.exp(ad.neg(ad.mul(x.r, x.tau))))
    return ad.sub(ad.mul(x.S, ad.norm_cdf(d1)), ad.mul(disc_k, ad.norm_cdf(d2)))


def bsm_delta(x: SkInputs, sigma):
    d1, _ = _d1_d2(x, sigma)
    return ad.norm_cdf(d1)


def absm_vol(m, tau, alpha):
    """``a0 + a1 m + a2 m^2 + a3 tau + a4 tau^2 + a5 m tau`` (unfloored).

    ``alpha`` is a length-6 vector or an ``(n, 6)`` per-sample stack.
    """
    a = [alpha[..., j] for j in range(6)]
    terms = [
        a[0],
        ad.mul(a[1], m),
        ad.mul(a[2], ad.square(m)),
        ad.mul(a[3], tau),
        ad.mul(a[4], ad.square(tau)),
        ad.mul(ad.mul(a[5], m), tau),
    ]
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def absm_price(x: SkInputs, alpha, floor: float = VOL_FLOOR):
    return bsm_price(x, smooth_floor(absm_vol(x.m, x.tau, alpha), floor))


class BSM(Representation):
    """Single latent volatility."""

    name = "BSM"

    def __init__(self, sigma_init: float = 0.2):
        self.blocks = (ParamBlock("sigma", "positive", 1, sigma_init),)

    def price(self, x, phi):
        return bsm_price(x, column(phi, 0))


class ABSM(Representation):
    """Quadratic implied-vol surface in moneyness and maturity."""

    name = "ABSM"

    def __init__(self, alpha0_init: float = 0.2, floor: float = VOL_FLOOR):
        self.floor = floor
        self.floor_hits = 0
        self.blocks = (
            ParamBlock("alpha0", "free", 1, alpha0_init),
            *(ParamBlock(f"alpha{j}", "free", 1, 0.0) for j in range(1, 6)),
        )

    def price(self, x, phi):
        vol = absm_vol(x.m, x.tau, phi)
        self.floor_hits += int(np.sum(np.asarray(ad.value(vol)) < self.floor))
        return bsm_price(x, smooth_floor(vol, self.floor))
