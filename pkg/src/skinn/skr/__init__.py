"""Structured-knowledge representations: differentiable theory-based pricers."""

from __future__ import annotations

from .base import ParamBlock, Representation, SkInputs, param_transform
from .bsm import ABSM, BSM, VOL_FLOOR, absm_price, absm_vol, bsm_delta, bsm_price, smooth_floor
from .cos import (
    HSV,
    HSVJ,
    CosConfig,
    cos_interval,
    cos_payoff_coeffs,
    cos_price,
    heston_cf,
    heston_cumulants,
    jump_cf,
    jump_cumulants,
)
from .mopa import MOPA, MopaGrid, mopa_price, snap_tenor
from .sabr import SABR, sabr_implied_vol, sabr_price, sabr_time_functions

__all__ = [
    "SkInputs",
    "ParamBlock",
    "Representation",
    "param_transform",
    "get_representation",
    "skr_price",
    "REPR_DIMS",
    "BSM",
    "ABSM",
    "SABR",
    "HSV",
    "HSVJ",
    "MOPA",
    "MopaGrid",
    "CosConfig",
    "VOL_FLOOR",
    "bsm_price",
    "bsm_delta",
    "absm_vol",
    "absm_price",
    "smooth_floor",
    "sabr_time_functions",
    "sabr_implied_vol",
    "sabr_price",
    "heston_cf",
    "jump_cf",
    "heston_cumulants",
    "jump_cumulants",
    "cos_interval",
    "cos_payoff_coeffs",
    "cos_price",
    "mopa_price",
    "snap_tenor",
]

REPR_DIMS = {
    "BSM": 1,
    "ABSM": 6,
    "HSV": 5,
    "HSVJ": 9,
    "SABR": 722,
    "MOPA": 2000,
    "DSNN-HSV": 5,
    "DSNN-NASV": 6,
    "AE-BSM": 2,
}

_CLOSED_FORM = {"BSM": BSM, "ABSM": ABSM, "SABR": SABR, "HSV": HSV, "HSVJ": HSVJ, "MOPA": MOPA}


def get_representation(name: str, **options) -> Representation:
    """Build a representation by id.

    Surrogate-backed ids (``DSNN-HSV``, ``DSNN-NASV``, ``AE-BSM``) need a
    ``surrogate=`` keyword holding a trained surrogate.
    """
    key = str(name).upper()
    if key in _CLOSED_FORM:
        return _CLOSED_FORM[key](**options)
    if key in ("DSNN-HSV", "DSNN-NASV", "AE-BSM"):
        from ..surrogate import surrogate_as_skr

        if "surrogate" not in options:
            raise ValueError(f"{key} needs a trained surrogate (pass surrogate=...)")
        return surrogate_as_skr(options.pop("surrogate"), **options)
    raise ValueError(f"unknown representation {name!r}; expected one of {sorted(REPR_DIMS)}")


def skr_price(repr, x: SkInputs, params, raw: bool = False):
    """Price with a representation (object or id); ``raw=True`` constrains first."""
    rep = repr if isinstance(repr, Representation) else get_representation(repr)
    phi = rep.constrain(params) if raw else params
    return rep.price(x, phi)
