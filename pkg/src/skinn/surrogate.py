"""Monte-Carlo simulators, deep surrogates and autoencoder representations.

Surrogates learn prices in strike units (``C/K``) from ``(m, tau, r, phi)``
and are then frozen; as representations only ``phi`` stays learnable.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .kernels import sv_terminal
from .nn import Adam, MlpConfig, MlpParams, init_mlp, mlp_forward, params_from_bytes, params_to_bytes
from .rng import derive_seed
from .skr.base import ParamBlock, Representation, SkInputs
from .skr.bsm import bsm_price

__all__ = [
    "SdeSpec",
    "SimulationError",
    "SAMPLING_BOUNDS",
    "MODEL_PARAMS",
    "simulate_terminal",
    "simulate_price",
    "SurrogateDataset",
    "build_surrogate_dataset",
    "FrozenSurrogate",
    "train_surrogate",
    "AE_M_GRID",
    "AE_TAU_GRID",
    "bsm_surfaces",
    "train_autoencoder",
    "surrogate_as_skr",
    "SurrogateRepresentation",
    "DecoderRepresentation",
    "bilinear_weights",
]

#: parameter order shared by the simulators, datasets and representations
MODEL_PARAMS = {
    "HSV": ("v_theta", "v0", "sigma_v", "rho", "kappa"),
    "NASV": ("v_theta", "v0", "sigma_v", "rho", "kappa", "gamma"),
}

SAMPLING_BOUNDS = {
    "m": (0.5, 1.5),
    "tau": (7.0 / 365.0, 1.0),
    "r": (0.0, 0.08),
    "kappa": (0.5, 5.0),
    "v_theta": (0.01, 0.25),
    "v0": (0.01, 0.25),
    "sigma_v": (0.05, 1.0),
    "rho": (-0.95, 0.0),
    "gamma": (0.3, 0.9),
}

_CHUNK = 8192


class SimulationError(FloatingPointError):
    pass


@dataclass(frozen=True)
class SdeSpec:
    """Stochastic-volatility system for Euler simulation.

    ``gamma`` is the variance elasticity (0.5 gives Heston). ``steps=None``
    means ``ceil(250 tau)``; ``paths`` counts both antithetic halves.
    """

    model: str = "HSV"
    kappa: float = 2.0
    v_theta: float = 0.04
    sigma_v: float = 0.5
    rho: float = -0.5
    v0: float = 0.04
    gamma: float = 0.5
    steps: int | None = None
    paths: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.model not in MODEL_PARAMS:
            raise ValueError(f"unknown SDE model {self.model!r}")
        if self.model == "HSV" and self.gamma != 0.5:
            raise ValueError("the Heston system has gamma = 0.5; use model='NASV'")
        for name in ("kappa", "v_theta", "v0"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.sigma_v < 0 or not -1.0 < self.rho < 1.0:
            raise ValueError("need sigma_v >= 0 and rho in (-1, 1)")
        if self.paths < 2:
            raise ValueError("need at least one antithetic pair")

    @classmethod
    def from_phi(cls, model: str, phi, **kw) -> "SdeSpec":
        return cls(model=model, **dict(zip(MODEL_PARAMS[model], map(float, phi))), **kw)

    def n_steps(self, tau: float) -> int:
        return int(self.steps) if self.steps else max(1, math.ceil(250.0 * tau))


def simulate_terminal(spec: SdeSpec, S: float, r: float, tau: float) -> np.ndarray:
    """Terminal prices of ``spec.paths`` antithetic full-truncation Euler paths.

    Pair ``j`` of chunk ``c`` draws from ``default_rng([seed, c])`` so results
    do not depend on how chunks are scheduled.
    """
    if tau <= 0 or S <= 0:
        raise ValueError("simulation needs S > 0 and tau > 0")
    steps = spec.n_steps(tau)
    dt = tau / steps
    pairs = spec.paths // 2
    out = []
    for c, start in enumerate(range(0, pairs, _CHUNK)):
        n = min(_CHUNK, pairs - start)
        z = np.random.default_rng([int(spec.seed), c]).standard_normal((steps, 2, n))
        st, bad = sv_terminal(S, spec.v0, r, spec.kappa, spec.v_theta, spec.sigma_v, spec.rho, spec.gamma, dt, z)
        if bad >= 0:
            raise SimulationError(f"non-finite path value at step {bad} of {steps} (chunk {c})")
        out.append(st.reshape(2, n))
    return np.concatenate(out, axis=1).reshape(-1) if out else np.zeros(0)


def _pair_payoffs(st: np.ndarray, K) -> np.ndarray:
    """Antithetic-pair averaged payoffs, shape ``(pairs,)`` or ``(nK, pairs)``."""
    pairs = st.reshape(2, -1)
    K = np.asarray(K, dtype=float)
    pay = np.maximum(pairs[None, :, :] - K.reshape(-1, 1, 1), 0.0).mean(axis=1)
    return pay[0] if K.ndim == 0 else pay


def simulate_price(spec: SdeSpec, x: SkInputs) -> tuple:
    """Discounted mean call payoff and its standard error (over antithetic
    pairs). Array strikes sharing one ``(S, r, tau)`` reuse the same paths."""
    S, r, tau = (float(np.asarray(ad.value(v)).reshape(-1)[0]) for v in (x.S, x.r, x.tau))
    K = np.asarray(ad.value(x.K), dtype=float)
    st = simulate_terminal(spec, S, r, tau)
    pay = _pair_payoffs(st, K)
    disc = math.exp(-r * tau)
    n = pay.shape[-1]
    price = disc * pay.mean(axis=-1)
    se = disc * pay.std(axis=-1, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(price)
    if K.ndim == 0:
        return float(price), float(se)
    return price, se


# ------------------------------------------------------------------ datasets


@dataclass
class SurrogateDataset:
    """Rows ``(m, tau, r, phi..., price)`` with ``price`` in ``C/K`` units."""

    model: str
    columns: tuple
    X: np.ndarray
    price: np.ndarray
    bounds: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.price)

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(self.columns) + ["price"])
            for row, p in zip(self.X, self.price):
                w.writerow([repr(float(v)) for v in row] + [repr(float(p))])

    @classmethod
    def from_csv(cls, path, model: str | None = None) -> "SurrogateDataset":
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = np.array([[float(v) for v in r] for r in reader]).reshape(-1, len(header))
        cols = tuple(header[:-1])
        if model is None:
            model = "NASV" if "gamma" in cols else "HSV"
        bounds = {c: SAMPLING_BOUNDS[c] for c in cols if c in SAMPLING_BOUNDS}
        return cls(model, cols, rows[:, :-1], rows[:, -1], bounds)


def _price_rows(args):
    model, cols, rows, seeds, paths, steps = args
    out = np.empty(len(rows))
    for i, (row, seed) in enumerate(zip(rows, seeds)):
        vals = dict(zip(cols, row))
        spec = SdeSpec(model=model, paths=paths, steps=steps, seed=int(seed),
                       **{k: vals[k] for k in MODEL_PARAMS[model]})
        m, tau, r = vals["m"], vals["tau"], vals["r"]
        price, _ = simulate_price(spec, SkInputs(1.0, m, r, tau))
        out[i] = price / m
    return out


def build_surrogate_dataset(model: str, n: int, bounds: dict | None = None, seed: int = 0,
                            paths: int = 1000, steps: int | None = None, jobs: int = 1) -> SurrogateDataset:
    """``n`` uniform draws of ``(m, tau, r, phi)`` with Monte-Carlo prices.

    Spot is normalised to 1 so ``K = m``; row ``i`` simulates with its own
    seed derived from ``(seed, 'sim', i)``.
    """
    if model not in MODEL_PARAMS:
        raise ValueError(f"unknown surrogate model {model!r}")
    cols = ("m", "tau", "r") + MODEL_PARAMS[model]
    b = dict(SAMPLING_BOUNDS)
    b.update(bounds or {})
    b = {c: b[c] for c in cols}
    for c, (lo, hi) in b.items():
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise ValueError(f"degenerate sampling bounds for {c}: {(lo, hi)}")
    lo = np.array([b[c][0] for c in cols])
    hi = np.array([b[c][1] for c in cols])
    rng = np.random.default_rng(derive_seed(seed, "sample"))
    X = lo + (hi - lo) * rng.random((int(n), len(cols)))
    seeds = np.array([derive_seed(seed, "sim", i) for i in range(int(n))], dtype=np.uint64)
    if n == 0:
        return SurrogateDataset(model, cols, X, np.zeros(0), b)
    jobs = max(1, int(jobs))
    parts = np.array_split(np.arange(int(n)), jobs)
    tasks = [(model, cols, X[p], seeds[p], paths, steps) for p in parts]
    if jobs == 1:
        price = _price_rows(tasks[0])
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            price = np.concatenate(list(ex.map(_price_rows, tasks)))
    return SurrogateDataset(model, cols, X, price, b)


# ----------------------------------------------------------------- surrogates


@dataclass
class FrozenSurrogate:
    """Trained network plus the metadata needed to evaluate it.

    ``kind`` is ``dsnn`` (inputs ``(m, tau, r, phi)``), ``decoder`` (latent to
    a 200-point surface) or ``encoder``.
    """

    kind: str
    model: str
    params: MlpParams
    input_names: tuple
    lo: np.ndarray
    hi: np.ndarray
    rmse: float = float("nan")
    out_mean: np.ndarray | None = None
    out_scale: float = 1.0
    latent_init: np.ndarray | None = None

    def normalise(self, X):
        c = 0.5 * (self.lo + self.hi)
        h = 0.5 * (self.hi - self.lo)
        return ad.div(ad.sub(X, c), h)

    def __call__(self, X):
        """Forward pass on raw inputs; weights enter as constants."""
        out = mlp_forward(self.params.flat, self.params.config, self.normalise(X))
        if self.out_mean is not None:
            out = ad.add(ad.mul(out, self.out_scale), self.out_mean)
        return out

    def to_bytes(self) -> bytes:
        def fl(a):
            return ",".join(repr(float(v)) for v in np.atleast_1d(a))

        lines = [
            "SKINN-SURROGATE 1",
            f"kind={self.kind}",
            f"model={self.model}",
            f"inputs={','.join(self.input_names)}",
            f"lo={fl(self.lo)}",
            f"hi={fl(self.hi)}",
            f"rmse={self.rmse!r}",
            f"out_scale={self.out_scale!r}",
        ]
        if self.out_mean is not None:
            lines.append(f"out_mean={fl(self.out_mean)}")
        if self.latent_init is not None:
            lines.append(f"latent_init={fl(self.latent_init)}")
        lines.append("END")
        return ("\n".join(lines) + "\n").encode() + params_to_bytes(self.params)

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple["FrozenSurrogate", int]:
        magic = b"SKINN-SURROGATE 1\n"
        if data[offset : offset + len(magic)] != magic:
            raise ValueError("not a serialised surrogate (bad magic)")
        pos = offset + len(magic)
        kv = {}
        while True:
            end = data.index(b"\n", pos)
            line = data[pos:end].decode()
            pos = end + 1
            if line == "END":
                break
            k, _, v = line.partition("=")
            kv[k] = v

        def arr(key):
            return np.array([float(v) for v in kv[key].split(",")]) if key in kv else None

        params, pos = params_from_bytes(data, pos)
        obj = cls(kv["kind"], kv["model"], params, tuple(kv["inputs"].split(",")) if kv["inputs"] else (),
                  arr("lo"), arr("hi"), float(kv["rmse"]), arr("out_mean"), float(kv["out_scale"]),
                  arr("latent_init"))
        return obj, pos

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FrozenSurrogate":
        return cls.from_bytes(Path(path).read_bytes())[0]


def _adam_fit(flat0, loss_fn, n_rows, epochs, lr, batch_size, seed, label):
    """Minibatch Adam on ``loss_fn(flat_var, idx)``; returns final params."""
    flat = flat0.copy()
    opt = Adam(flat.size, lr=lr)
    rng = np.random.default_rng(derive_seed(seed, "batches"))
    bs = n_rows if not batch_size or batch_size >= n_rows else int(batch_size)
    for epoch in range(int(epochs)):
        order = rng.permutation(n_rows) if bs < n_rows else np.arange(n_rows)
        for start in range(0, n_rows, bs):
            idx = order[start : start + bs]
            tape = ad.Tape()
            fv = tape.lift(flat)
            loss = loss_fn(fv, idx)
            lv = float(ad.value(loss))
            if not np.isfinite(lv):
                raise FloatingPointError(f"{label} training diverged at epoch {epoch}")
            (g,) = ad.grad(loss, [fv])
            flat = opt.step(flat, g)
    return flat


def train_surrogate(dataset: SurrogateDataset, config: MlpConfig | None = None, epochs: int = 40,
                    lr: float = 3e-3, batch_size: int = 1024) -> FrozenSurrogate:
    """Fit an MLP to ``dataset`` by minibatch Adam and freeze it."""
    if len(dataset) == 0:
        raise ValueError("cannot train a surrogate on an empty dataset")
    X = np.asarray(dataset.X, dtype=float)
    y = np.asarray(dataset.price, dtype=float)
    d = X.shape[1]
    config = config or MlpConfig(input_dim=d, hidden_layers=3, hidden_width=64, activation="silu")
    if config.input_dim != d:
        config = replace(config, input_dim=d)
    lo = np.array([dataset.bounds.get(c, (X[:, j].min(), X[:, j].max()))[0] for j, c in enumerate(dataset.columns)])
    hi = np.array([dataset.bounds.get(c, (X[:, j].min(), X[:, j].max()))[1] for j, c in enumerate(dataset.columns)])
    hi = np.where(hi > lo, hi, lo + 1.0)
    shell = FrozenSurrogate("dsnn", dataset.model, init_mlp(config), tuple(dataset.columns), lo, hi)
    Z = np.asarray(shell.normalise(X))

    def loss_fn(fv, idx):
        pred = mlp_forward(fv, config, Z[idx])
        return ad.vmean(ad.square(ad.sub(pred, y[idx])))

    flat = _adam_fit(shell.params.flat, loss_fn, len(y), epochs, lr, batch_size, config.seed, "surrogate")
    shell.params = MlpParams(config, flat)
    shell.rmse = float(np.sqrt(np.mean((mlp_forward(flat, config, Z) - y) ** 2)))
    return shell


# --------------------------------------------------------------- autoencoder

AE_M_GRID = np.linspace(0.7, 1.3, 20)
AE_TAU_GRID = np.linspace(7.0 / 365.0, 1.0, 10)
AE_POINTS = AE_M_GRID.size * AE_TAU_GRID.size


def bsm_surfaces(n: int, sigma_range=(0.1, 0.5), r: float = 0.02, noise: float = 0.0,
                 seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``n`` BSM call surfaces in ``C/K`` on the 20 x 10 (m, tau) grid
    (m-major flattening), with optional multiplicative noise."""
    rng = np.random.default_rng(derive_seed(seed, "surfaces"))
    sig = rng.uniform(*sigma_range, size=n)
    mm, tt = np.meshgrid(AE_M_GRID, AE_TAU_GRID, indexing="ij")
    x = SkInputs.from_moneyness(mm.ravel(), tt.ravel(), r)
    surf = np.array([bsm_price(x, s) / mm.ravel() for s in sig]).reshape(n, AE_POINTS)
    if noise:
        surf = surf * (1.0 + noise * rng.standard_normal(surf.shape))
    return surf, sig


def train_autoencoder(surfaces, latent_dim: int = 2, config: MlpConfig | None = None, epochs: int = 2000,
                      lr: float = 1e-3, batch_size: int = 0) -> tuple[FrozenSurrogate, FrozenSurrogate]:
    """Jointly train encoder (200 -> latent) and decoder (latent -> 200) on
    standardised surfaces; returns both frozen."""
    S = np.atleast_2d(np.asarray(surfaces, dtype=float))
    if S.shape[1] != AE_POINTS:
        raise ValueError(f"surfaces must have {AE_POINTS} grid values, got {S.shape[1]}")
    config = config or MlpConfig(hidden_layers=2, hidden_width=64, activation="silu")
    mean = S.mean(axis=0)
    scale = float(S.std())
    scale = scale if scale > 1e-12 else 1.0
    Z = (S - mean) / scale
    enc_cfg = replace(config, input_dim=AE_POINTS, output_dim=latent_dim)
    dec_cfg = replace(config, input_dim=latent_dim, output_dim=AE_POINTS, seed=config.seed + 1)
    enc0, dec0 = init_mlp(enc_cfg), init_mlp(dec_cfg)
    p_enc = enc0.flat.size

    def loss_fn(fv, idx):
        lat = mlp_forward(fv[:p_enc], enc_cfg, Z[idx])
        rec = mlp_forward(fv[p_enc:], dec_cfg, lat)
        return ad.vmean(ad.square(ad.sub(rec, Z[idx])))

    flat = _adam_fit(np.concatenate([enc0.flat, dec0.flat]), loss_fn, len(S), epochs, lr, batch_size,
                     config.seed, "autoencoder")
    enc = MlpParams(enc_cfg, flat[:p_enc])
    dec = MlpParams(dec_cfg, flat[p_enc:])
    lat = mlp_forward(enc.flat, enc_cfg, Z)
    rec = mlp_forward(dec.flat, dec_cfg, lat) * scale + mean
    rmse = float(np.sqrt(np.mean((rec - S) ** 2)))
    ones = np.ones(AE_POINTS)
    encoder = FrozenSurrogate("encoder", "BSM", enc, (), mean, mean + 2.0 * scale * ones, rmse)
    decoder = FrozenSurrogate("decoder", "BSM", dec, (), -ones[:latent_dim], ones[:latent_dim], rmse,
                              out_mean=mean, out_scale=scale, latent_init=lat.mean(axis=0))
    return encoder, decoder


def bilinear_weights(m, tau, m_grid=AE_M_GRID, tau_grid=AE_TAU_GRID):
    """Flat corner indices ``(n, 4)`` and weights ``(n, 4)`` on the surface
    grid; queries outside the grid are clamped to its edge."""
    m = np.clip(np.atleast_1d(np.asarray(m, dtype=float)), m_grid[0], m_grid[-1])
    t = np.clip(np.atleast_1d(np.asarray(tau, dtype=float)), tau_grid[0], tau_grid[-1])
    i = np.clip(np.searchsorted(m_grid, m, side="right") - 1, 0, m_grid.size - 2)
    j = np.clip(np.searchsorted(tau_grid, t, side="right") - 1, 0, tau_grid.size - 2)
    a = (m - m_grid[i]) / (m_grid[i + 1] - m_grid[i])
    b = (t - tau_grid[j]) / (tau_grid[j + 1] - tau_grid[j])
    nt = tau_grid.size
    idx = np.stack([i * nt + j, i * nt + j + 1, (i + 1) * nt + j, (i + 1) * nt + j + 1], axis=1)
    w = np.stack([(1 - a) * (1 - b), (1 - a) * b, a * (1 - b), a * b], axis=1)
    return idx, w


# ----------------------------------------------------------- representations


def _option_columns(x: SkInputs, n: int):
    return [ad.add(np.zeros(n), v) for v in (x.m, x.tau, x.r)]


class SurrogateRepresentation(Representation):
    """Frozen DSNN as ``g_phi``: price = K * f_SR(m, tau, r, phi)."""

    def __init__(self, frozen: FrozenSurrogate, init=None):
        if frozen.kind != "dsnn":
            raise ValueError("expected a deep-surrogate network")
        self.frozen = frozen
        self.name = f"DSNN-{frozen.model}"
        names = frozen.input_names[3:]
        if tuple(names) != MODEL_PARAMS[frozen.model]:
            raise ValueError(f"surrogate phi slots {names} do not match {frozen.model}")
        lo, hi = frozen.lo[3:], frozen.hi[3:]
        init = 0.5 * (lo + hi) if init is None else np.asarray(init, dtype=float)
        self.blocks = tuple(ParamBlock(n, "box", 1, float(c), lo=float(a), hi=float(b))
                            for n, c, a, b in zip(names, init, lo, hi))

    def price(self, x, phi):
        n = len(x)
        q = self.dim
        if np.shape(ad.value(phi))[-1] != q:
            raise ValueError(f"{self.name}: expected {q} phi slots")
        ph = ad.add(np.zeros((n, q)), phi)
        X = ad.concatenate([ad.stack(_option_columns(x, n), axis=1), ph], axis=1)
        return ad.mul(x.K, self.frozen(X))


class DecoderRepresentation(Representation):
    """Autoencoder decoder as ``g_phi``: latent code -> surface -> bilinear
    lookup at each option's ``(m, tau)``; price = K * surface value."""

    def __init__(self, decoder: FrozenSurrogate):
        if decoder.kind != "decoder":
            raise ValueError("expected a decoder network")
        self.decoder = decoder
        self.name = f"AE-{decoder.model}"
        init = decoder.latent_init if decoder.latent_init is not None else np.zeros(decoder.params.config.input_dim)
        self.blocks = tuple(ParamBlock(f"z{j}", "free", 1, float(c)) for j, c in enumerate(init))

    def surface(self, phi):
        return self.decoder(phi)

    def price(self, x, phi):
        n = len(x)
        m = np.broadcast_to(np.asarray(ad.value(x.m), float), (n,))
        tau = np.broadcast_to(np.asarray(ad.value(x.tau), float), (n,))
        idx, _ = bilinear_weights(m, tau)
        # weights rebuilt on the tape so prices stay differentiable in (m, tau)
        nt = AE_TAU_GRID.size
        i, j = idx[:, 0] // nt, idx[:, 0] % nt
        mv = ad.clip(ad.add(np.zeros(n), x.m), AE_M_GRID[0], AE_M_GRID[-1])
        tv = ad.clip(ad.add(np.zeros(n), x.tau), AE_TAU_GRID[0], AE_TAU_GRID[-1])
        a = ad.div(ad.sub(mv, AE_M_GRID[i]), AE_M_GRID[i + 1] - AE_M_GRID[i])
        b = ad.div(ad.sub(tv, AE_TAU_GRID[j]), AE_TAU_GRID[j + 1] - AE_TAU_GRID[j])
        a1, b1 = ad.sub(1.0, a), ad.sub(1.0, b)
        w = ad.stack([ad.mul(a1, b1), ad.mul(a1, b), ad.mul(a, b1), ad.mul(a, b)], axis=1)
        surf = self.surface(phi)
        if np.ndim(ad.value(surf)) == 1:
            corners = ad.getitem(surf, idx)
        else:
            corners = ad.getitem(surf, (np.arange(n)[:, None], idx))
        return ad.mul(x.K, ad.vsum(ad.mul(corners, w), axis=-1))


def surrogate_as_skr(frozen: FrozenSurrogate, phi_slots: int | None = None, **kw) -> Representation:
    """Wrap a frozen network as a representation; only ``phi`` is learnable."""
    rep = DecoderRepresentation(frozen) if frozen.kind == "decoder" else SurrogateRepresentation(frozen, **kw)
    if phi_slots is not None and phi_slots != rep.dim:
        raise ValueError(f"{rep.name} has {rep.dim} phi slots, got {phi_slots}")
    return rep
