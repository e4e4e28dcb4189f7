"""Synthetic option panels for tests, oracles and acceptance experiments."""

from __future__ import annotations

import math

import numpy as np

from .data import TAU_MAX, TAU_MIN, Panel
from .rng import derive_seed
from .skr import SkInputs, bsm_price
from .surrogate import SdeSpec, simulate_price

__all__ = ["bsm_cross_section", "bsm_panel", "heston_panel", "trading_days"]


def trading_days(start: str, n: int) -> np.ndarray:
    """``n`` consecutive business days starting on or after ``start``."""
    first = np.busday_offset(np.datetime64(start, "D"), 0, roll="forward")
    return np.busday_offset(first, np.arange(n), roll="forward")


def bsm_cross_section(n: int, sigma: float = 0.2, r: float = 0.02, noise: float = 0.0, seed: int = 0,
                      S: float = 100.0, m_range=(0.8, 1.2), tau_range=(TAU_MIN, TAU_MAX),
                      noise_kind: str = "multiplicative", date: str = "2020-01-02") -> Panel:
    """One day of ``n`` BSM calls with uniform moneyness and maturity.

    ``noise_kind='multiplicative'`` scales prices by ``1 + noise * eps``;
    ``'additive'`` adds ``noise * eps`` in ``C/K`` units.
    """
    rng = np.random.default_rng(derive_seed(seed, "cross-section"))
    m = rng.uniform(*m_range, n)
    tau = rng.uniform(*tau_range, n)
    K = S * m
    clean = np.asarray(bsm_price(SkInputs(np.full(n, S), K, r, tau), sigma), dtype=float)
    eps = rng.standard_normal(n)
    if noise_kind == "multiplicative":
        mid = clean * (1.0 + noise * eps)
    elif noise_kind == "additive":
        mid = clean + noise * eps * K
    else:
        raise ValueError(f"unknown noise kind {noise_kind!r}")
    ids = np.array([f"X{i}" for i in range(n)], dtype=object)
    p = Panel(np.full(n, np.datetime64(date, "D")), np.full(n, S), K, np.full(n, r), tau, mid, ids)
    p.meta["clean"] = clean
    return p


def _listed_options(day_index: int, days: np.ndarray, S: float, strikes_rel, expiries):
    out = []
    d = days[day_index]
    for e in expiries:
        tau = (e - d).astype(int) / 365.0
        if TAU_MIN <= tau <= TAU_MAX:
            for k in strikes_rel:
                out.append((k, e, tau))
    return out


def bsm_panel(n_days: int = 60, sigma: float = 0.2, r: float = 0.02, noise: float = 0.0, seed: int = 0,
              S0: float = 100.0, mu: float = 0.05, start: str = "2020-01-02", strikes=None,
              expiry_months: int = 14, path_sigma: float | None = None) -> Panel:
    """Daily panel: a GBM spot path and a fixed ladder of listed strikes and
    monthly expiries, each quote priced by BSM at ``sigma``.

    ``path_sigma`` (default ``sigma``) drives the spot path, so a regime
    shift can be produced by pricing and simulating with different values.
    """
    rng = np.random.default_rng(derive_seed(seed, "bsm-panel"))
    days = trading_days(start, n_days)
    ps = sigma if path_sigma is None else path_sigma
    z = rng.standard_normal(n_days - 1)
    steps = (mu - 0.5 * ps**2) / 252.0 + ps * math.sqrt(1.0 / 252.0) * z
    S = S0 * np.exp(np.concatenate([[0.0], np.cumsum(steps)]))
    strikes = np.asarray(strikes if strikes is not None else S0 * np.linspace(0.8, 1.2, 9), dtype=float)
    month0 = days[0].astype("datetime64[M]")
    # third-Friday-like expiry: the 15th of each month
    expiries = (month0 + np.arange(1, expiry_months + 1)).astype("datetime64[D]") + np.timedelta64(14, "D")
    rows = []
    for i, d in enumerate(days):
        for k in strikes:
            for e in expiries:
                tau = (e - d).astype(int) / 365.0
                if TAU_MIN <= tau <= TAU_MAX:
                    rows.append((d, S[i], k, tau, f"K{k:g}@{e}"))
    date = np.array([r_[0] for r_ in rows], dtype="datetime64[D]")
    Sv = np.array([r_[1] for r_ in rows])
    K = np.array([r_[2] for r_ in rows])
    tau = np.array([r_[3] for r_ in rows])
    ids = np.array([r_[4] for r_ in rows], dtype=object)
    clean = np.asarray(bsm_price(SkInputs(Sv, K, r, tau), sigma), dtype=float)
    mid = clean * (1.0 + noise * rng.standard_normal(len(clean))) if noise else clean
    p = Panel(date, Sv, K, np.full(len(K), r), tau, mid, ids)
    p.meta["clean"] = clean
    return p


def heston_panel(n_days: int = 5, phi=(0.04, 0.04, 0.5, -0.7, 2.0), r: float = 0.02, seed: int = 0,
                 S0: float = 100.0, start: str = "2020-01-02", strikes=None, expiry_months: int = 6,
                 paths: int = 20000, steps: int | None = None) -> tuple[Panel, np.ndarray]:
    """Daily panel priced by Monte-Carlo under Heston; returns the panel and
    the per-quote standard errors. Quotes sharing a date and expiry share
    paths. ``phi`` is ``(v_theta, v0, sigma_v, rho, kappa)``; the spot and
    variance follow one Euler path sampled daily."""
    vt, v0, sv, rho, kappa = (float(v) for v in phi)
    rng = np.random.default_rng(derive_seed(seed, "heston-panel"))
    days = trading_days(start, n_days)
    dt = 1.0 / 252.0
    S = np.empty(n_days)
    v = np.empty(n_days)
    S[0], v[0] = S0, v0
    for i in range(1, n_days):
        z1, z2 = rng.standard_normal(2)
        vp = max(v[i - 1], 0.0)
        S[i] = S[i - 1] * math.exp((r - 0.5 * vp) * dt + math.sqrt(vp * dt) * z1)
        v[i] = v[i - 1] + kappa * (vt - vp) * dt + sv * math.sqrt(vp * dt) * (rho * z1 + math.sqrt(1 - rho**2) * z2)
    strikes = np.asarray(strikes if strikes is not None else S0 * np.linspace(0.85, 1.15, 7), dtype=float)
    month0 = days[0].astype("datetime64[M]")
    expiries = (month0 + np.arange(1, expiry_months + 1)).astype("datetime64[D]") + np.timedelta64(14, "D")
    cols = {k: [] for k in ("date", "S", "K", "tau", "mid", "se", "id")}
    for i, d in enumerate(days):
        for j, e in enumerate(expiries):
            tau = (e - d).astype(int) / 365.0
            if not TAU_MIN <= tau <= TAU_MAX:
                continue
            spec = SdeSpec("HSV", kappa=kappa, v_theta=vt, sigma_v=sv, rho=rho, v0=max(v[i], 1e-8),
                           paths=paths, steps=steps, seed=derive_seed(seed, "mc", i, j))
            price, se = simulate_price(spec, SkInputs(S[i], strikes, r, tau))
            for k, pr, s in zip(strikes, price, se):
                cols["date"].append(d)
                cols["S"].append(S[i])
                cols["K"].append(k)
                cols["tau"].append(tau)
                cols["mid"].append(pr)
                cols["se"].append(s)
                cols["id"].append(f"K{k:g}@{e}")
    n = len(cols["K"])
    panel = Panel(np.array(cols["date"], dtype="datetime64[D]"), np.array(cols["S"]), np.array(cols["K"]),
                  np.full(n, r), np.array(cols["tau"]), np.array(cols["mid"]), np.array(cols["id"], dtype=object))
    panel.meta["v"] = v
    return panel, np.array(cols["se"])
