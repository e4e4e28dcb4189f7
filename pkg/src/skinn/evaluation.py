"""Out-of-sample evaluation: rolling schedule, pricing and hedging errors,
forecast-comparison tests and the portfolio backtest metrics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from . import autodiff as ad
from .data import Panel
from .skr import Representation, SkInputs, bsm_delta
from .skr.bsm import BSM

__all__ = [
    "RollingPeriod",
    "build_schedule",
    "rmse",
    "model_delta",
    "nn_delta",
    "structural_delta",
    "hedge_errors",
    "HedgeResult",
    "DmResult",
    "dm_test",
    "newey_west_variance",
    "WilcoxonResult",
    "wilcoxon_test",
    "phi_stability",
    "OlsResult",
    "ols",
    "GroupMetrics",
    "decile_backtest",
    "stars",
    "pairwise_matrix",
    "write_matrix",
    "write_period_report",
]

log = logging.getLogger(__name__)


def _norm_sf(z: float) -> float:
    return float(special.ndtr(-z))


# ------------------------------------------------------------------ schedule


@dataclass(frozen=True)
class RollingPeriod:
    """Three training months, then one month for each of two test windows.

    Window bounds are month starts; a window holds dates in ``[start, end)``.
    """

    index: int
    train_start: np.datetime64
    test1_start: np.datetime64
    test2_start: np.datetime64
    test2_end: np.datetime64

    @property
    def train_end(self) -> np.datetime64:
        return self.test1_start

    @property
    def test1_end(self) -> np.datetime64:
        return self.test2_start

    def windows(self) -> dict:
        return {
            "train": (self.train_start, self.test1_start),
            "test1": (self.test1_start, self.test2_start),
            "test2": (self.test2_start, self.test2_end),
        }


def build_schedule(dates, train_months: int = 3) -> list[RollingPeriod]:
    """All periods whose train and test windows contain trading dates,
    advancing the train start by one calendar month each time."""
    d = np.unique(np.asarray(dates, dtype="datetime64[D]"))
    if d.size == 0:
        raise ValueError("no trading dates")
    months = d.astype("datetime64[M]")
    first, last = months[0], months[-1]
    span = int((last - first).astype(int)) + 1
    if span < train_months + 2:
        raise ValueError(f"need at least {train_months + 2} months of dates, got {span}")
    present = set(months.astype(int).tolist())
    out = []
    for k in range(span - train_months - 1):
        m0 = first + k
        t1 = m0 + train_months
        t2 = t1 + 1
        train_ok = any(int(m) in present for m in (m0 + np.arange(train_months)).astype(int))
        if train_ok and int(t1.astype(int)) in present and int(t2.astype(int)) in present:
            out.append(RollingPeriod(len(out) + 1, m0.astype("datetime64[D]"), t1.astype("datetime64[D]"),
                                     t2.astype("datetime64[D]"), (t2 + 1).astype("datetime64[D]")))
    return out


# ---------------------------------------------------------------- accuracy


def rmse(pred, actual) -> float:
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if pred.shape != actual.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {actual.shape}")
    if pred.size == 0:
        raise ValueError("rmse of empty vectors")
    return float(np.sqrt(np.mean((pred - actual) ** 2)))


# ------------------------------------------------------------------- deltas


def nn_delta(model, panel: Panel) -> np.ndarray:
    """Network Delta from homogeneity: ``C = K f(m, tau, r)`` with ``m = K/S``
    gives ``dC/dS = -(df/dm) K^2 / S^2``."""
    from .trainer import network

    X = panel.features()
    tape = ad.Tape()
    xv = tape.lift(X)
    out = network(model.theta.flat, model.theta.config, xv)
    (g,) = ad.grad(ad.vsum(out), [xv])
    return -np.asarray(g)[:, 0] * panel.K**2 / panel.S**2


def structural_delta(rep: Representation, phi, x: SkInputs) -> np.ndarray:
    """``dg/dS`` of a representation (closed form for BSM, tape otherwise)."""
    if isinstance(rep, BSM):
        return np.asarray(bsm_delta(x, np.asarray(phi)[..., 0]), dtype=float)
    tape = ad.Tape()
    S = np.asarray(ad.value(x.S), dtype=float)
    n = len(x)
    sv = tape.lift(np.broadcast_to(S, (n,)).copy())
    price = rep.price(SkInputs(sv, x.K, x.r, x.tau), phi)
    (g,) = ad.grad(ad.vsum(price), [sv])
    return np.asarray(g, dtype=float)


def model_delta(model, x) -> np.ndarray:
    """Delta of a fitted network (``x`` a :class:`Panel`), or of a
    ``(representation, phi)`` pair (``x`` a panel or :class:`SkInputs`)."""
    if isinstance(model, tuple):
        rep, phi = model
        sk = x.sk_inputs() if isinstance(x, Panel) else x
        return structural_delta(rep, phi, sk)
    if not isinstance(x, Panel):
        S, K, r, tau = (np.atleast_1d(np.asarray(ad.value(v), float)) for v in (x.S, x.K, x.r, x.tau))
        S, K, r, tau = np.broadcast_arrays(S, K, r, tau)
        x = Panel(np.zeros(len(S), "datetime64[D]"), S, K, r, tau, np.ones(len(S)))
    return nn_delta(model, x)


# ------------------------------------------------------------------ hedging


@dataclass
class HedgeResult:
    he: float
    daily: np.ndarray
    days: list
    skipped: int


def _delta_for(hedger, panel: Panel) -> np.ndarray:
    if hedger is None or (np.isscalar(hedger) and float(hedger) == 0.0):
        return np.zeros(len(panel))
    if callable(hedger) and not hasattr(hedger, "theta"):
        return np.asarray(hedger(panel), dtype=float)
    return model_delta(hedger, panel)


def hedge_errors(hedger, panel: Panel, next_day_panel: Panel | None = None) -> HedgeResult:
    """Mean over days of ``|mean_i Pi_i(t+1)|`` for a delta-hedged short call.

    At ``t``: long ``Delta`` shares, short the call, bond ``-(S Delta - C)``.
    At ``t+1`` the bond accrues ``e^{r/252}``. Options are matched across
    days by identifier. ``hedger`` is a fitted network, a
    ``(representation, phi)`` pair, a callable returning deltas for a panel,
    or ``None`` for the unhedged position.
    """
    if next_day_panel is not None:
        pairs = [(panel, next_day_panel)]
    else:
        days = panel.dates()
        pairs = [(panel.subset(panel.date == a), panel.subset(panel.date == b)) for a, b in zip(days[:-1], days[1:])]
    daily, used, skipped = [], [], 0
    for today, tomorrow in pairs:
        ids_t = today.ids()
        ids_n = {k: i for i, k in enumerate(tomorrow.ids())}
        match = np.array([ids_n.get(k, -1) for k in ids_t])
        keep = match >= 0
        if not keep.any():
            skipped += 1
            log.warning("no matched options after %s; day skipped", today.date[0] if len(today) else "?")
            continue
        delta = _delta_for(hedger, today)[keep]
        j = match[keep]
        S0, C0, r0 = today.S[keep], today.mid[keep], today.r[keep]
        S1, C1 = tomorrow.S[j], tomorrow.mid[j]
        bond = -(S0 * delta - C0)
        pi = S1 * delta - C1 + bond * np.exp(r0 / 252.0)
        daily.append(float(np.mean(pi)))
        used.append(today.date[0])
    daily = np.asarray(daily)
    he = float(np.mean(np.abs(daily))) if daily.size else float("nan")
    return HedgeResult(he, daily, used, skipped)


# -------------------------------------------------------------------- tests


@dataclass(frozen=True)
class DmResult:
    """``p_value`` is ``P(Z > statistic)``: small values mean the first
    series has larger losses, i.e. the second model is more accurate."""

    statistic: float
    p_value: float
    lag: int
    degenerate: bool = False


def newey_west_variance(d, lag: int) -> float:
    d = np.asarray(d, dtype=float)
    n = d.size
    e = d - d.mean()
    v = float(e @ e) / n
    for k in range(1, lag + 1):
        v += 2.0 * (1.0 - k / (lag + 1.0)) * float(e[k:] @ e[:-k]) / n
    return v


def dm_test(e1, e2, lag: int | None = None) -> DmResult:
    """Diebold-Mariano on the loss differential ``e1 - e2`` with a
    Bartlett-kernel HAC variance (lag ``floor(n^(1/3))``)."""
    e1 = np.asarray(e1, dtype=float)
    e2 = np.asarray(e2, dtype=float)
    if e1.shape != e2.shape:
        raise ValueError("error series must have equal length")
    n = e1.size
    if n < 10:
        raise ValueError("Diebold-Mariano needs at least 10 observations")
    d = e1 - e2
    L = int(math.floor(n ** (1.0 / 3.0))) if lag is None else int(lag)
    var = newey_west_variance(d, L)
    mean = float(d.mean())
    if var <= 0.0:
        stat = 0.0 if mean == 0.0 else math.copysign(math.inf, mean)
        return DmResult(stat, 0.5 if mean == 0.0 else _norm_sf(stat), L, True)
    stat = mean / math.sqrt(var / n)
    return DmResult(stat, _norm_sf(stat), L, False)


@dataclass(frozen=True)
class WilcoxonResult:
    """``W`` is the sum of ranks of positive differences; ``p_value`` is the
    upper tail of the normal approximation (positive shift). ``z`` carries a
    symmetric continuity correction, so it can differ slightly from the
    quantile behind ``p_value``."""

    statistic: float
    z: float
    p_value: float
    n: int
    degenerate: bool = False


def _average_ranks(a: np.ndarray) -> np.ndarray:
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(a.size)
    sa = a[order]
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and sa[j + 1] == sa[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def wilcoxon_test(d) -> WilcoxonResult:
    """Signed-rank test with average ranks for ties, normal approximation
    and continuity correction; zero differences are dropped."""
    d = np.asarray(d, dtype=float)
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return WilcoxonResult(0.0, 0.0, 0.5, 0, True)
    ranks = _average_ranks(np.abs(d))
    w = float(ranks[d > 0].sum())
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(counts**3 - counts)) / 48.0
    if var <= 0:
        return WilcoxonResult(w, 0.0, 0.5, n, True)
    diff = w - mean
    sd = math.sqrt(var)
    # z is corrected towards zero so it stays antisymmetric; the upper-tail
    # p-value uses P(W >= w) ~ P(Z > (w - 0.5 - mean) / sd)
    z = (diff - 0.5 * np.sign(diff)) / sd
    return WilcoxonResult(w, float(z), _norm_sf((diff - 0.5) / sd), n, n < 10)


def phi_stability(series) -> np.ndarray:
    """``||phi_{t+1} - phi_t||_2`` for consecutive periods."""
    arrs = [np.atleast_1d(np.asarray(p, dtype=float)) for p in series]
    if len(arrs) < 2:
        raise ValueError("need at least two periods")
    if len({a.shape for a in arrs}) != 1:
        raise ValueError("parameter dimension changes between periods")
    a = np.stack(arrs)
    return np.linalg.norm(np.diff(a, axis=0), axis=1)


# --------------------------------------------------------------------- OLS


@dataclass(frozen=True)
class OlsResult:
    coef: np.ndarray
    std_errors: np.ndarray
    r2: float
    adj_r2: float
    resid: np.ndarray


def ols(y, X) -> OlsResult:
    """Least squares with classical standard errors; ``X`` includes the
    intercept column."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, k = X.shape
    if n <= k:
        raise ValueError("need more observations than regressors")
    if np.linalg.matrix_rank(X) < k:
        raise np.linalg.LinAlgError("design matrix is rank deficient")
    XtX = X.T @ X
    if np.linalg.cond(XtX) < 1e10:
        coef = np.linalg.solve(XtX, X.T @ y)
        XtX_inv = np.linalg.inv(XtX)
    else:
        Q, R = np.linalg.qr(X)
        coef = np.linalg.solve(R, Q.T @ y)
        R_inv = np.linalg.inv(R)
        XtX_inv = R_inv @ R_inv.T
    resid = y - X @ coef
    ssr = float(resid @ resid)
    s2 = ssr / (n - k)
    se = np.sqrt(np.diag(XtX_inv) * s2)
    yc = y - y.mean()
    sst = float(yc @ yc)
    r2 = 1.0 - ssr / sst if sst > 0 else 1.0
    adj = 1.0 - (1.0 - r2) * (n - 1) / (n - k)
    return OlsResult(coef, se, r2, adj, resid)


# ---------------------------------------------------------------- backtest


@dataclass(frozen=True)
class GroupMetrics:
    """Annualised mean and SD in percent; ``sharpe`` is NaN when flagged."""

    mean_pct: float
    sd_pct: float
    sharpe: float
    flagged: bool
    daily: np.ndarray


def _metrics(r: np.ndarray, periods: int = 252) -> GroupMetrics:
    mean = float(r.mean())
    sd = float(r.std(ddof=1)) if r.size > 1 else 0.0
    flagged = sd <= 1e-15
    sharpe = float("nan") if flagged else mean / sd * math.sqrt(periods)
    return GroupMetrics(mean * periods * 100.0, sd * math.sqrt(periods) * 100.0, sharpe, flagged, r)


def decile_backtest(predictions, realized, groups: int = 10) -> dict:
    """Daily sort by predicted return (descending) into ``groups`` buckets;
    ``H`` is the top bucket, ``L`` the bottom, ``H-L`` their spread."""
    P = np.atleast_2d(np.asarray(predictions, dtype=float))
    R = np.atleast_2d(np.asarray(realized, dtype=float))
    if P.shape != R.shape:
        raise ValueError("predictions and realised returns must align")
    if P.shape[1] < groups:
        raise ValueError(f"need at least {groups} assets")
    hi, lo = [], []
    for p, r in zip(P, R):
        order = np.argsort(-p, kind="mergesort")
        buckets = np.array_split(order, groups)
        hi.append(r[buckets[0]].mean())
        lo.append(r[buckets[-1]].mean())
    hi, lo = np.array(hi), np.array(lo)
    return {"H": _metrics(hi), "L": _metrics(lo), "H-L": _metrics(hi - lo)}


# ----------------------------------------------------------------- reports


def stars(p: float) -> str:
    return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.1 else ""


def pairwise_matrix(errors: dict, test: str = "dm") -> tuple[list, list]:
    """Cell ``(row, col)`` tests ``errors[row]`` against ``errors[col]``;
    a positive statistic favours the column model."""
    names = list(errors)
    rows = []
    for a in names:
        row = []
        for b in names:
            if a == b:
                row.append("")
                continue
            if test == "dm":
                res = dm_test(errors[a], errors[b])
                stat, p = res.statistic, res.p_value
            else:
                res = wilcoxon_test(np.asarray(errors[a]) - np.asarray(errors[b]))
                stat, p = res.z, res.p_value
            row.append(f"{stat:.3f}{stars(p)}")
        rows.append(row)
    return names, rows


def write_matrix(path, names: list, rows: list) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model"] + names)
        for n, r in zip(names, rows):
            w.writerow([n] + r)


def write_period_report(path, records: list[dict]) -> None:
    cols = ["period", "model", "rmse_t1", "rmse_t2", "he_t1", "he_t2"]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for rec in records:
            w.writerow([rec["period"], rec["model"]] + [repr(float(rec[c])) for c in cols[2:]])
