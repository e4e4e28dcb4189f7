"""Fully-connected networks on the autodiff tape.

Parameters live in one flat float64 vector (layer by layer, weights then
bias) so optimisers, Hessians and persistence all work on a single array.
"""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad

__all__ = [
    "MlpConfig",
    "MlpParams",
    "ConfigError",
    "init_mlp",
    "mlp_forward",
    "mlp_input_grad",
    "param_count",
    "Adam",
    "params_to_bytes",
    "params_from_bytes",
]

_ACTIVATIONS = {"relu": ad.max0, "silu": ad.silu, "tanh": ad.tanh}
_MAGIC = b"SKINN-MLP 1\n"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int = 3
    hidden_layers: int = 3
    hidden_width: int = 32
    activation: str = "relu"
    seed: int = 0
    output_dim: int = 1

    def __post_init__(self):
        for name in ("input_dim", "hidden_layers", "hidden_width", "output_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    def layer_dims(self) -> list[tuple[int, int]]:
        widths = [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]
        return list(zip(widths[:-1], widths[1:]))


def param_count(config: MlpConfig) -> int:
    return sum(i * o + o for i, o in config.layer_dims())


@dataclass
class MlpParams:
    config: MlpConfig
    flat: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (param_count(self.config),):
            raise ConfigError(
                f"flat vector has shape {self.flat.shape}, expected ({param_count(self.config)},)"
            )

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out, off = [], 0
        for i, o in self.config.layer_dims():
            w = self.flat[off : off + i * o].reshape(i, o)
            off += i * o
            b = self.flat[off : off + o]
            off += o
            out.append((w, b))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(self.config, self.flat.copy())


OUTPUT_INIT_GAIN = 0.1


def init_mlp(config: MlpConfig) -> MlpParams:
    """Kaiming-uniform weights, zero biases, deterministic in ``config.seed``.

    The output layer is scaled down by ``OUTPUT_INIT_GAIN`` so untrained
    predictions start close to zero rather than at the scale of the inputs.
    """
    rng = np.random.default_rng(int(config.seed))
    chunks = []
    dims = config.layer_dims()
    for li, (fan_in, fan_out) in enumerate(dims):
        bound = np.sqrt(6.0 / fan_in) * (OUTPUT_INIT_GAIN if li == len(dims) - 1 else 1.0)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return MlpParams(config, np.concatenate(chunks))


def mlp_forward(flat, config: MlpConfig, x):
    """Evaluate the network.

    ``flat`` is the parameter vector, either shape ``(p,)`` or a per-sample
    stack ``(n, p)`` (row ``i`` is used for input row ``i``). ``x`` is a single
    input vector or an ``(n, input_dim)`` batch, plain or taped. Returns shape
    ``(n,)`` (``(n, output_dim)`` for vector outputs) or a scalar for a single
    input vector.
    """
    if isinstance(flat, MlpParams):
        flat = flat.flat
    single = np.ndim(ad.value(x)) == 1
    if single:
        x = ad.reshape(x, (1, -1))
    if np.shape(ad.value(x))[-1] != config.input_dim:
        raise ValueError(
            f"input has {np.shape(ad.value(x))[-1]} features, network expects {config.input_dim}"
        )
    batched = np.ndim(ad.value(flat)) == 2
    n = np.shape(ad.value(x))[0]
    if batched and np.shape(ad.value(flat))[0] != n:
        raise ValueError("per-sample parameter rows must match the batch size")
    act = _ACTIVATIONS[config.activation]
    h = x
    off = 0
    dims = config.layer_dims()
    for li, (i, o) in enumerate(dims):
        if batched:
            w = ad.reshape(flat[:, off : off + i * o], (n, i, o))
            off += i * o
            b = flat[:, off : off + o]
            h = ad.add(ad.reshape(ad.matmul(ad.reshape(h, (n, 1, i)), w), (n, o)), b)
        else:
            w = ad.reshape(flat[off : off + i * o], (i, o))
            off += i * o
            b = flat[off : off + o]
            h = ad.add(ad.matmul(h, w), b)
        off += o
        if li < len(dims) - 1:
            h = act(h)
    if config.output_dim == 1:
        h = ad.reshape(h, (n,))
        if single:
            h = ad.reshape(h, ())
    elif single:
        h = ad.reshape(h, (config.output_dim,))
    return h


def mlp_input_grad(params: MlpParams, x) -> np.ndarray:
    """Exact d f / d x for each input row (same shape as ``x``)."""
    x = np.asarray(x, dtype=float)
    tape = ad.Tape()
    xv = tape.lift(x)
    out = mlp_forward(params.flat, params.config, xv)
    (g,) = ad.grad(ad.vsum(out), [xv])
    return np.asarray(g, dtype=float)


class Adam:
    """Adam on a flat parameter vector."""

    def __init__(self, n: int, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -------------------------------------------------------------- persistence


def params_to_bytes(params: MlpParams) -> bytes:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    for k, v in asdict(params.config).items():
        buf.write(f"{k}={v}\n".encode())
    buf.write(f"count={params.flat.size}\nEND\n".encode())
    buf.write(params.flat.astype("<f8").tobytes())
    return buf.getvalue()


def params_from_bytes(data: bytes, offset: int = 0) -> tuple[MlpParams, int]:
    """Parse one serialised network starting at ``offset``; returns the
    params and the offset just past them."""
    if data[offset : offset + len(_MAGIC)] != _MAGIC:
        raise ValueError("not a serialised network (bad magic)")
    pos = offset + len(_MAGIC)
    fields: dict[str, str] = {}
    while True:
        end = data.index(b"\n", pos)
        line = data[pos:end].decode()
        pos = end + 1
        if line == "END":
            break
        k, _, v = line.partition("=")
        fields[k] = v
    count = int(fields.pop("count"))
    cfg = MlpConfig(
        input_dim=int(fields["input_dim"]),
        hidden_layers=int(fields["hidden_layers"]),
        hidden_width=int(fields["hidden_width"]),
        activation=fields["activation"],
        seed=int(fields["seed"]),
        output_dim=int(fields.get("output_dim", 1)),
    )
    flat = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return MlpParams(cfg, flat), pos + 8 * count
