"""Hot numeric loops: stochastic-volatility path stepping and binomial trees.

Each kernel has a numba implementation and a vectorised numpy twin; the one
exported is chosen by :mod:`skinn._accel`. Both consume the same normal draws,
so results agree to round-off whichever backend runs.
"""

from __future__ import annotations

import math

import numpy as np

from ._accel import HAVE_NUMBA, njit

__all__ = ["sv_terminal", "crr_call", "sv_terminal_numpy", "crr_call_numpy", "HAVE_NUMBA"]


# --------------------------------------------------------- SV Euler stepping


@njit
def _sv_terminal_nb(s0, v0, r, kappa, theta, sigma_v, rho, gamma, dt, z):
    n_steps = z.shape[0]
    n = z.shape[2]
    out = np.empty(2 * n)
    sq_dt = math.sqrt(dt)
    rho_c = math.sqrt(1.0 - rho * rho)
    bad_step = -1
    for p in range(n):
        for a in range(2):
            sign = 1.0 if a == 0 else -1.0
            x = math.log(s0)
            v = v0
            for k in range(n_steps):
                z1 = sign * z[k, 0, p]
                z2 = sign * z[k, 1, p]
                vp = v if v > 0.0 else 0.0
                if gamma == 0.5:
                    vol_v = math.sqrt(vp)
                else:
                    vol_v = vp**gamma
                x += (r - 0.5 * vp) * dt + math.sqrt(vp) * sq_dt * z1
                v += kappa * (theta - vp) * dt + sigma_v * vol_v * sq_dt * (rho * z1 + rho_c * z2)
                if bad_step < 0 and not (math.isfinite(x) and math.isfinite(v)):
                    bad_step = k
            out[a * n + p] = math.exp(x)
    return out, bad_step


def sv_terminal_numpy(s0, v0, r, kappa, theta, sigma_v, rho, gamma, dt, z):
    """Terminal prices of full-truncation Euler paths (log-price stepping).

    ``z`` has shape ``(n_steps, 2, n)``; the first ``n`` outputs use ``z``
    and the last ``n`` the antithetic ``-z``. Returns ``(S_T, bad_step)``
    with ``bad_step = -1`` when every path stayed finite.
    """
    n_steps, _, n = z.shape
    zz = np.concatenate([z, -z], axis=2)
    x = np.full(2 * n, math.log(s0))
    v = np.full(2 * n, float(v0))
    sq_dt = math.sqrt(dt)
    rho_c = math.sqrt(1.0 - rho * rho)
    bad_step = -1
    with np.errstate(all="ignore"):
        for k in range(n_steps):
            z1 = zz[k, 0]
            z2 = zz[k, 1]
            vp = np.maximum(v, 0.0)
            vol_v = np.sqrt(vp) if gamma == 0.5 else vp**gamma
            x = x + ((r - 0.5 * vp) * dt + np.sqrt(vp) * sq_dt * z1)
            v = v + (kappa * (theta - vp) * dt + sigma_v * vol_v * sq_dt * (rho * z1 + rho_c * z2))
            if bad_step < 0 and not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
                bad_step = k
    return np.exp(x), bad_step


def sv_terminal(s0, v0, r, kappa, theta, sigma_v, rho, gamma, dt, z):
    z = np.ascontiguousarray(z, dtype=np.float64)
    args = tuple(float(a) for a in (s0, v0, r, kappa, theta, sigma_v, rho, gamma, dt))
    if HAVE_NUMBA:
        return _sv_terminal_nb(*args, z)
    return sv_terminal_numpy(*args, z)


# ------------------------------------------------------------ binomial tree


@njit
def _crr_call_nb(s, k, r, tau, sigma, n):
    dt = tau / n
    step = sigma * math.sqrt(dt)
    u = math.exp(step)
    d = 1.0 / u
    p = (math.exp(r * dt) - d) / (u - d)
    q = 1.0 - p
    disc = math.exp(-r * dt)
    vals = np.empty(n + 1)
    for j in range(n + 1):
        st = s * math.exp((n - 2 * j) * step)
        vals[j] = st - k if st > k else 0.0
    for i in range(n - 1, -1, -1):
        for j in range(i + 1):
            vals[j] = disc * (p * vals[j] + q * vals[j + 1])
    return vals[0]


def crr_call_numpy(s, k, r, tau, sigma, n):
    """European call on an ``n``-step Cox-Ross-Rubinstein tree."""
    dt = tau / n
    step = sigma * math.sqrt(dt)
    u = math.exp(step)
    d = 1.0 / u
    p = (math.exp(r * dt) - d) / (u - d)
    q = 1.0 - p
    disc = math.exp(-r * dt)
    st = s * np.exp((n - 2 * np.arange(n + 1)) * step)
    vals = np.maximum(st - k, 0.0)
    for i in range(n, 0, -1):
        vals = disc * (p * vals[:i] + q * vals[1 : i + 1])
    return float(vals[0])


def crr_call(s, k, r, tau, sigma, n=20_000):
    if HAVE_NUMBA:
        return float(_crr_call_nb(float(s), float(k), float(r), float(tau), float(sigma), int(n)))
    return crr_call_numpy(float(s), float(k), float(r), float(tau), float(sigma), int(n))
