"""Joint estimation of the network and the structured-knowledge parameters.

Objective: ``L = L_Data + lambda * L_SK`` where ``L_Data`` is the mean
squared error on observed ``C/K`` (plus optional boundary pairs) and ``L_SK``
the mean squared gap between the network and ``g_phi / K`` on a fixed
collocation set.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Panel
from .nn import Adam, MlpConfig, MlpParams, init_mlp, mlp_forward, params_from_bytes, params_to_bytes
from .rng import derive_seed
from .skr import CosConfig, Representation, SkInputs, get_representation

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "ConfigError",
    "CollocationSet",
    "FittedModel",
    "data_loss",
    "sk_loss",
    "intrinsic_target",
    "lower_bound_target",
    "boundary_augment",
    "make_collocation",
    "build_representation",
    "train_skinn",
    "network",
    "objective_value",
    "meanvar_weights",
    "meanvar_sk_loss",
    "train_meanvar",
    "read_config",
    "save_model",
    "load_model",
]


class ConfigError(ValueError):
    pass


#: fixed standardisation of the network inputs (m, tau, r)
FEATURE_SHIFT = np.array([1.0, 0.5, 0.0])
FEATURE_SCALE = np.array([0.2, 0.5, 0.05])


def network(theta, mlp: MlpConfig, X):
    """``f_theta`` on raw features ``(m, tau, r)``, returning ``C/K``."""
    return mlp_forward(theta, mlp, ad.div(ad.sub(X, FEATURE_SHIFT), FEATURE_SCALE))


@dataclass(frozen=True)
class TrainConfig:
    repr: str = "BSM"
    lambda_sk: float = 1.0
    epochs: int = 500
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_colloc: int = 2048
    m_lo: float = 0.7
    m_hi: float = 1.3
    tau_lo: float = 7.0 / 365.0
    tau_hi: float = 1.0
    boundary: bool = False
    n_boundary: int = 100
    hidden_layers: int = 3
    hidden_width: int = 32
    activation: str = "relu"
    seed: int = 0
    cos_n: int = 256
    cos_l: float = 12.0
    surrogate: str = ""
    phi_init: tuple = ()
    colloc_from_panel: bool = False

    def __post_init__(self):
        if self.lambda_sk < 0:
            raise ConfigError("lambda must be non-negative")
        if self.epochs < 0 or self.lr <= 0:
            raise ConfigError("epochs must be >= 0 and lr > 0")
        if not (self.m_lo < self.m_hi and 0 < self.tau_lo < self.tau_hi):
            raise ConfigError("collocation box must be non-degenerate with tau > 0")
        if self.n_colloc < 1:
            raise ConfigError("need at least one collocation point")

    @property
    def plain(self) -> bool:
        return str(self.repr).upper() in ("", "NONE", "NN")

    def mlp_config(self) -> MlpConfig:
        return MlpConfig(3, self.hidden_layers, self.hidden_width, self.activation,
                         derive_seed(self.seed, "init"))


_ALIASES = {"lambda": "lambda_sk", "seeds": "seed", "lambda_sk": "lambda_sk"}


def _coerce(name: str, text: str):
    ftype = {f.name: f.type for f in fields(TrainConfig)}[name]
    text = text.strip()
    if ftype == "bool":
        low = text.lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ConfigError(f"{name}: expected a boolean, got {text!r}")
        return low in ("1", "true", "yes", "on")
    if ftype == "int":
        return int(text)
    if ftype == "float":
        return float(text)
    if ftype == "tuple":
        return tuple(float(v) for v in text.split(",") if v.strip())
    return text


def read_config(path, **overrides) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` comments); unknown keys are errors."""
    names = {f.name for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, _, val = (s.strip() for s in line.partition("="))
        key = _ALIASES.get(key.lower(), key.lower())
        if key not in names:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, val)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def config_lines(cfg: TrainConfig) -> list[str]:
    out = []
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(float(a)) for a in v)
        elif isinstance(v, float):
            v = repr(v)
        out.append(f"{f.name}={v}")
    return out


# ------------------------------------------------------------- loss pieces


def data_loss(pred, target):
    """Mean squared error in ``C/K`` units."""
    n = np.size(ad.value(pred))
    if n == 0:
        raise ValueError("data loss needs at least one observation")
    return ad.vmean(ad.square(ad.sub(pred, target)))


def sk_loss(f_colloc, g_colloc):
    """Mean squared gap between network and representation (both ``C/K``)."""
    if np.size(ad.value(f_colloc)) == 0:
        raise ValueError("structured-knowledge loss needs collocation points")
    return ad.vmean(ad.square(ad.sub(f_colloc, g_colloc)))


@dataclass(frozen=True)
class CollocationSet:
    """Fixed inputs where the network is tied to the representation."""

    m: np.ndarray
    tau: np.ndarray
    r: float
    S: float

    def __len__(self) -> int:
        return len(self.m)

    def features(self) -> np.ndarray:
        return np.column_stack([self.m, self.tau, np.full(len(self.m), self.r)])

    def sk_inputs(self) -> SkInputs:
        return SkInputs(np.full(len(self.m), self.S), self.S * self.m, self.r, self.tau)


def make_collocation(cfg: TrainConfig, panel: Panel) -> CollocationSet:
    """Uniform draws over the configured box (or the observation inputs
    themselves when ``colloc_from_panel``); ``r`` and ``S`` are panel medians."""
    r = float(np.median(panel.r))
    S = float(np.median(panel.S))
    if cfg.colloc_from_panel:
        return CollocationSet(panel.m.copy(), panel.tau.copy(), r, S)
    rng = np.random.default_rng(derive_seed(cfg.seed, "colloc"))
    m = rng.uniform(cfg.m_lo, cfg.m_hi, cfg.n_colloc)
    tau = rng.uniform(cfg.tau_lo, cfg.tau_hi, cfg.n_colloc)
    return CollocationSet(m, tau, r, S)


def intrinsic_target(m):
    """``(S - K)^+ / K = (1/m - 1)^+``."""
    return np.maximum(1.0 / np.asarray(m, dtype=float) - 1.0, 0.0)


def lower_bound_target(m, tau, r):
    """``(S - K e^{-r tau})^+ / K``."""
    return np.maximum(1.0 / np.asarray(m, dtype=float) - np.exp(-np.asarray(r) * np.asarray(tau)), 0.0)


def boundary_augment(colloc: CollocationSet, n: int = 100, seed: int = 0):
    """Extra ``(features, C/K target)`` pairs from textbook call boundaries:
    intrinsic value at expiry, zero deep out of the money, and the
    discounted-strike lower bound deep in the money."""
    rng = np.random.default_rng(derive_seed(seed, "boundary"))
    n1 = n - 2 * (n // 3)
    n2 = n3 = n // 3
    r = colloc.r
    m1 = rng.uniform(0.7, 1.3, n1)
    t1 = np.full(n1, 1e-6)
    m2 = rng.uniform(1.5, 2.0, n2)
    t2 = rng.uniform(1e-6, 0.05, n2)
    m3 = rng.uniform(0.3, 0.5, n3)
    t3 = rng.uniform(7.0 / 365.0, 1.0, n3)
    X = np.column_stack([np.concatenate([m1, m2, m3]), np.concatenate([t1, t2, t3]), np.full(n, r)])
    y = np.concatenate([intrinsic_target(m1), np.zeros(n2), lower_bound_target(m3, t3, r)])
    return X, y


# ---------------------------------------------------------------- the model


def build_representation(cfg: TrainConfig, panel: Panel | None = None) -> Representation | None:
    if cfg.plain:
        return None
    key = cfg.repr.upper()
    if key in ("HSV", "HSVJ"):
        return get_representation(key, cos=CosConfig(cfg.cos_n, cfg.cos_l))
    if key == "SABR":
        spot = float(np.median(panel.S)) if panel is not None and len(panel) else 1.0
        return get_representation(key, spot_scale=spot)
    if key in ("DSNN-HSV", "DSNN-NASV", "AE-BSM"):
        from .surrogate import FrozenSurrogate

        if not cfg.surrogate:
            raise ConfigError(f"{key} needs `surrogate = <path>` in the configuration")
        return get_representation(key, surrogate=FrozenSurrogate.load(cfg.surrogate))
    return get_representation(key)


@dataclass
class FittedModel:
    config: TrainConfig
    theta: MlpParams
    phi_raw: np.ndarray
    rep: Representation | None
    trace: list = field(default_factory=list)
    L_data: float = float("nan")
    L_sk: float = float("nan")
    total: float = float("nan")

    @property
    def name(self) -> str:
        return "NN" if self.rep is None else f"SKINN+{self.rep.name}"

    @property
    def phi(self) -> np.ndarray:
        if self.rep is None:
            return np.zeros(0)
        return np.asarray(self.rep.constrain(self.phi_raw), dtype=float)

    def predict(self, features) -> np.ndarray:
        """Network output ``f_theta`` in ``C/K`` units."""
        return np.asarray(network(self.theta.flat, self.theta.config, np.asarray(features, float)))

    def price(self, panel: Panel) -> np.ndarray:
        return self.predict(panel.features()) * panel.K

    def structural_price(self, panel: Panel) -> np.ndarray:
        if self.rep is None:
            raise ValueError("a plain network has no structured-knowledge representation")
        return np.asarray(self.rep.price(panel.sk_inputs(), self.phi), dtype=float)

    def write_trace(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "L_Data", "L_SK", "total"])
            for e, ld, ls, tot in self.trace:
                w.writerow([e, repr(ld), repr(ls), repr(tot)])


class _Problem:
    """Fixed arrays of one training run, with the taped objective."""

    def __init__(self, cfg: TrainConfig, panel: Panel, rep: Representation | None,
                 colloc: CollocationSet | None = None):
        if len(panel) == 0:
            raise ValueError("cannot train on an empty panel")
        self.cfg, self.rep, self.lam = cfg, rep, float(cfg.lambda_sk)
        self.colloc = colloc if colloc is not None else make_collocation(cfg, panel)
        Xd, yd = panel.features(), panel.target
        self.n_obs = len(yd)
        if cfg.boundary:
            Xb, yb = boundary_augment(self.colloc, cfg.n_boundary, cfg.seed)
            Xd, yd = np.vstack([Xd, Xb]), np.concatenate([yd, yb])
        self.Xd, self.yd = Xd, yd
        self.use_sk = rep is not None
        self.Xc = self.colloc.features() if self.use_sk else np.zeros((0, 3))
        self.xc = self.colloc.sk_inputs() if self.use_sk else None
        self.Kc = self.colloc.S * self.colloc.m
        self.X = np.vstack([self.Xd, self.Xc])
        self.nd = len(self.yd)
        self.mlp = cfg.mlp_config()

    def g_colloc(self, phi_raw):
        return ad.div(self.rep.price(self.xc, self.rep.constrain(phi_raw)), self.Kc)

    def losses(self, theta, phi_raw, need_sk: bool = True):
        """``(L_Data, L_SK, total)``; ``L_SK`` is still reported when lambda = 0
        but then it is kept off the tape."""
        if not self.use_sk or self.lam == 0.0:
            # the colloc rows stay out of the forward pass so that lambda = 0
            # reproduces the plain network bit for bit
            ld = data_loss(network(theta, self.mlp, self.Xd), self.yd)
            if not self.use_sk or not need_sk:
                return ld, float("nan"), ld
            fc = network(np.asarray(ad.value(theta)), self.mlp, self.Xc)
            ls = float(sk_loss(fc, np.asarray(self.g_colloc(np.asarray(ad.value(phi_raw))))))
            return ld, ls, ld
        pred = network(theta, self.mlp, self.X)
        ld = data_loss(pred[: self.nd], self.yd)
        ls = sk_loss(pred[self.nd :], self.g_colloc(phi_raw))
        return ld, ls, ad.add(ld, ad.mul(self.lam, ls))


def train_skinn(cfg: TrainConfig, panel: Panel, rep: Representation | None = None,
                colloc: CollocationSet | None = None, phi_raw0=None, theta0: MlpParams | None = None,
                trace_every: int = 1, on_epoch=None) -> FittedModel:
    """Full-batch Adam over the concatenation ``(theta, raw phi)``.

    ``on_epoch(epoch, theta, phi_raw)`` is called after every update when given.
    """
    if rep is None and not cfg.plain:
        rep = build_representation(cfg, panel)
    prob = _Problem(cfg, panel, rep, colloc)
    theta = (theta0.flat if theta0 is not None else init_mlp(prob.mlp).flat).copy()
    p = theta.size
    if rep is None:
        phi = np.zeros(0)
    elif phi_raw0 is not None:
        phi = np.asarray(phi_raw0, dtype=float).copy()
    elif cfg.phi_init:
        phi = rep.unconstrain(np.asarray(cfg.phi_init, dtype=float))
    else:
        phi = rep.init_raw()
    x = np.concatenate([theta, phi])
    opt = Adam(x.size, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    trace = []

    def evaluate(xv, taped: bool, need_sk: bool = True):
        tape = ad.Tape() if taped else None
        tv = tape.lift(xv[:p]) if taped else xv[:p]
        pv = tape.lift(xv[p:]) if taped and rep is not None else xv[p:]
        ld, ls, tot = prob.losses(tv, pv, need_sk=need_sk)
        return tv, pv, ld, ls, tot

    def record(e, ld, ls, tot):
        ld_, ls_, tot_ = float(ad.value(ld)), float(ad.value(ls)), float(ad.value(tot))
        if not np.isfinite(tot_):
            raise FloatingPointError(f"non-finite loss at epoch {e}: L_Data={ld_!r}, L_SK={ls_!r}")
        if e % trace_every == 0 or e == cfg.epochs:
            trace.append((e, ld_, ls_, tot_))
        return ld_, ls_, tot_

    for epoch in range(int(cfg.epochs)):
        try:
            tv, pv, ld, ls, tot = evaluate(x, True, epoch % trace_every == 0)
        except ad.NonFiniteError as exc:
            raise FloatingPointError(f"non-finite loss at epoch {epoch}: {exc}") from exc
        record(epoch, ld, ls, tot)
        wrt = [tv] + ([pv] if isinstance(pv, ad.Var) else [])
        grads = ad.grad(tot, wrt)
        g = np.concatenate([np.ravel(gr) for gr in grads] + ([] if len(grads) > 1 else [np.zeros(x.size - p)]))
        x = opt.step(x, g)
        if on_epoch is not None:
            on_epoch(epoch, x[:p], x[p:])
    epoch = int(cfg.epochs)
    _, _, ld, ls, tot = evaluate(x, False)
    ld, ls, tot = record(epoch, ld, ls, tot)
    return FittedModel(cfg, MlpParams(prob.mlp, x[:p]), x[p:], rep, trace, ld, ls, tot)


def objective_value(model: FittedModel, panel: Panel) -> tuple[float, float, float]:
    """Recompute ``(L_Data, L_SK, total)`` for a fitted model on ``panel``."""
    prob = _Problem(model.config, panel, model.rep)
    ld, ls, tot = prob.losses(model.theta.flat, model.phi_raw)
    return float(ad.value(ld)), float(ad.value(ls)), float(ad.value(tot))


# --------------------------------------------------------------- persistence

_MODEL_MAGIC = b"SKINN-MODEL 1\n"


def save_model(model: FittedModel, path) -> None:
    """Text header (config, losses), then the network and raw ``phi``."""
    lines = config_lines(model.config) + [
        f"L_Data={model.L_data!r}",
        f"L_SK={model.L_sk!r}",
        f"total={model.total!r}",
        f"phi_count={model.phi_raw.size}",
    ]
    if model.rep is not None and hasattr(model.rep, "spot_scale"):
        lines.append(f"spot_scale={model.rep.spot_scale!r}")
    lines.append("END")
    blob = _MODEL_MAGIC + ("\n".join(lines) + "\n").encode() + params_to_bytes(model.theta)
    blob += np.asarray(model.phi_raw, dtype="<f8").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)


def load_model(path) -> FittedModel:
    data = Path(path).read_bytes()
    if not data.startswith(_MODEL_MAGIC):
        raise ValueError(f"{path}: not a model file (bad magic)")
    pos = len(_MODEL_MAGIC)
    kv = {}
    while True:
        end = data.index(b"\n", pos)
        line = data[pos:end].decode()
        pos = end + 1
        if line == "END":
            break
        k, _, v = line.partition("=")
        kv[k] = v
    names = {f.name for f in fields(TrainConfig)}
    cfg = TrainConfig(**{k: _coerce(k, v) for k, v in kv.items() if k in names})
    theta, pos = params_from_bytes(data, pos)
    q = int(kv["phi_count"])
    phi = np.frombuffer(data, dtype="<f8", count=q, offset=pos).astype(float)
    rep = build_representation(cfg) if not cfg.plain else None
    if rep is not None and cfg.repr.upper() == "SABR":
        # the alpha prior scale is part of the representation; recover it
        rep = get_representation("SABR", spot_scale=float(kv.get("spot_scale", 1.0)))
    return FittedModel(cfg, theta, phi, rep, [], float(kv["L_Data"]), float(kv["L_SK"]), float(kv["total"]))


# -------------------------------------------------------------- mean-variance


def meanvar_weights(w_raw, l, u):
    """Clamp to ``[l, u]`` then renormalise to sum to one."""
    l = np.broadcast_to(np.asarray(l, dtype=float), np.shape(ad.value(w_raw)))
    u = np.broadcast_to(np.asarray(u, dtype=float), np.shape(ad.value(w_raw)))
    if l.sum() > 1.0 + 1e-12 or u.sum() < 1.0 - 1e-12 or np.any(l > u):
        raise ValueError("infeasible weight bounds: need sum(l) <= 1 <= sum(u) and l <= u")
    c = ad.clip(w_raw, l, u) if np.all(l == l.flat[0]) and np.all(u == u.flat[0]) else _clip_vec(w_raw, l, u)
    if float(np.sum(ad.value(c))) <= 0.0:
        # every weight clamped to a zero lower bound: no direction to normalise
        return np.full(np.shape(ad.value(c)), 1.0 / np.size(ad.value(c)))
    return ad.div(c, ad.vsum(c))


def _clip_vec(w, l, u):
    wv = np.asarray(ad.value(w))
    inside = (wv >= l) & (wv <= u)
    return ad.add(ad.mul(w, inside.astype(float)), np.where(inside, 0.0, np.clip(wv, l, u)))


def meanvar_sk_loss(pred_returns, w_raw, Sigma, eta: float, l, u):
    """``-w' f + eta w' Sigma w`` with clamp-then-normalise weights."""
    Sigma = np.asarray(Sigma, dtype=float)
    if Sigma.ndim != 2 or Sigma.shape[0] != Sigma.shape[1] or not np.allclose(Sigma, Sigma.T):
        raise ValueError("Sigma must be a symmetric square matrix")
    w = meanvar_weights(w_raw, l, u)
    quad = ad.vsum(ad.mul(w, ad.reshape(ad.matmul(ad.reshape(w, (1, -1)), Sigma), (-1,))))
    return ad.add(ad.neg(ad.vsum(ad.mul(w, pred_returns))), ad.mul(eta, quad))


@dataclass
class AllocationResult:
    theta: MlpParams
    w_raw: np.ndarray
    weights: np.ndarray
    trace: list
    # normalisation can lift weights above ``u``; largest excess over the bound
    bound_excess: float = 0.0


def train_meanvar(features, returns, Sigma, eta: float, l=0.0, u=0.2, lambda_sk: float = 1.0,
                  epochs: int = 2000, lr: float = 1e-3, mlp: MlpConfig | None = None, seed: int = 0,
                  w_raw0=None, n_alloc: int | None = None) -> AllocationResult:
    """Return-forecasting network tied to a mean-variance allocation.

    ``features``: ``(rows, d)`` signals; ``returns``: realised next-period
    returns used as the data target. The allocation acts on the last
    ``n_alloc`` rows (default: all of them, i.e. one cross-section).
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(returns, dtype=float)
    n = len(y) if n_alloc is None else int(n_alloc)
    if not 0 < n <= len(y):
        raise ValueError("n_alloc must be between 1 and the number of rows")
    mlp = mlp or MlpConfig(input_dim=X.shape[1], hidden_layers=1, hidden_width=16, activation="silu",
                           seed=derive_seed(seed, "init"))
    theta = init_mlp(mlp).flat
    rng = np.random.default_rng(derive_seed(seed, "weights"))
    lb = np.broadcast_to(np.asarray(l, float), (n,))
    ub = np.broadcast_to(np.asarray(u, float), (n,))
    w = np.asarray(w_raw0, float) if w_raw0 is not None else rng.uniform(lb, ub)
    x = np.concatenate([theta, w])
    p = theta.size
    opt = Adam(x.size, lr)
    trace = []
    for epoch in range(int(epochs)):
        tape = ad.Tape()
        tv, wv = tape.lift(x[:p]), tape.lift(x[p:])
        f = mlp_forward(tv, mlp, X)
        ld = data_loss(f, y)
        ls = meanvar_sk_loss(f if n == len(y) else f[len(y) - n :], wv, Sigma, eta, lb, ub)
        tot = ad.add(ld, ad.mul(lambda_sk, ls))
        trace.append((epoch, float(ad.value(ld)), float(ad.value(ls)), float(ad.value(tot))))
        gt, gw = ad.grad(tot, [tv, wv])
        x = opt.step(x, np.concatenate([gt, gw]))
    weights = np.asarray(meanvar_weights(x[p:], lb, ub))
    excess = float(max(0.0, np.max(weights - ub)))
    if excess > 1e-6:
        log.warning("normalised weights exceed the upper bound by %.3g", excess)
    return AllocationResult(MlpParams(mlp, x[:p]), x[p:], weights, trace, excess)
