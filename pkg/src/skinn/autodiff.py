"""Reverse-mode automatic differentiation on a linear tape.

Every differentiable quantity is a :class:`Var` holding a float or a numpy
array together with its position on a :class:`Tape`. Operations record a
vector-Jacobian closure; :func:`grad` sweeps the tape backwards once.

All operations accept plain numbers / arrays as well as ``Var``. When none of
the arguments is a ``Var`` the plain numpy result is returned, so pricing
kernels written against this module also run untaped at full numpy speed.

Complex quantities are :class:`CVar` pairs of real parts, so adjoints flow
through real and imaginary components separately.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Tape",
    "Var",
    "CVar",
    "TapeError",
    "DomainError",
    "NonFiniteError",
    "lift",
    "grad",
    "value",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "square",
    "exp",
    "log",
    "log1p",
    "sqrt",
    "sin",
    "cos",
    "atan2",
    "max0",
    "silu",
    "tanh",
    "sigmoid",
    "softplus",
    "norm_cdf",
    "norm_pdf",
    "clip",
    "where",
    "matmul",
    "vsum",
    "vmean",
    "reshape",
    "concatenate",
    "stack",
    "softmax",
    "cadd",
    "csub",
    "cmul",
    "cdiv",
    "cexp",
    "clog",
    "clog1p",
    "csqrt",
    "creal",
    "cimag",
]


class TapeError(RuntimeError):
    """Variables from different tapes were combined, or a gradient was
    requested across tapes."""


class DomainError(ValueError):
    """Argument outside the domain of an elementary operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or infinity."""


_SQRT_2PI = np.sqrt(2.0 * np.pi)


class Tape:
    """Append-only record of operations.

    Node ``i`` stores the indices of its parents (always ``< i``), the shape
    of its value and a closure mapping the output adjoint to parent adjoints.
    """

    __slots__ = ("_parents", "_vjps", "_shapes", "_ops")

    def __init__(self) -> None:
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._shapes: list[tuple[int, ...]] = []
        self._ops: list[str] = []

    def __len__(self) -> int:
        return len(self._parents)

    def lift(self, x) -> "Var":
        return lift(x, self)

    def mark(self) -> int:
        """Checkpoint; nodes recorded later can be dropped with :meth:`truncate`."""
        return len(self._parents)

    def truncate(self, mark: int) -> None:
        del self._parents[mark:]
        del self._vjps[mark:]
        del self._shapes[mark:]
        del self._ops[mark:]

    def _push(self, op: str, val, parents: tuple[int, ...], vjp) -> "Var":
        idx = len(self._parents)
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._shapes.append(np.shape(val))
        self._ops.append(op)
        return Var(self, idx, val)

    def backward(self, out: "Var", seed=None) -> list:
        """Adjoints of every node up to ``out``; ``None`` where unreachable."""
        if out.tape is not self:
            raise TapeError("output variable belongs to a different tape")
        adj: list = [None] * (out.index + 1)
        if seed is None:
            if np.size(out.value) != 1:
                raise ValueError("backward() without seed needs a scalar output")
            seed = np.ones(np.shape(out.value))
        adj[out.index] = np.asarray(seed, dtype=float)
        parents, vjps, shapes = self._parents, self._vjps, self._shapes
        for i in range(out.index, -1, -1):
            g = adj[i]
            if g is None or not parents[i]:
                continue
            grads = vjps[i](g)
            for p, gp in zip(parents[i], grads):
                if p < 0 or gp is None:
                    continue
                gp = _unbroadcast(gp, shapes[p])
                adj[p] = gp if adj[p] is None else adj[p] + gp
        return adj


class Var:
    """A recorded value: float or numpy array living on a tape."""

    __slots__ = ("tape", "index", "value")
    __array_priority__ = 100.0

    def __init__(self, tape: Tape, index: int, val) -> None:
        self.tape = tape
        self.index = index
        self.value = val

    def __repr__(self) -> str:
        return f"Var(index={self.index}, value={self.value!r})"

    @property
    def shape(self) -> tuple[int, ...]:
        return np.shape(self.value)

    @property
    def ndim(self) -> int:
        return np.ndim(self.value)

    @property
    def size(self) -> int:
        return int(np.size(self.value))

    def __len__(self) -> int:
        return len(self.value)

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, o):
        return power(self, o)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def value(x):
    """Underlying numeric value of a ``Var`` (identity for plain numbers)."""
    return x.value if isinstance(x, Var) else x


_val = value


def _find_tape(args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise TapeError("cannot combine variables from different tapes")
    return tape


def _check(op: str, v):
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"{op}: produced a non-finite value")
    return v


def _node(op: str, v, args: Sequence, vjp):
    """Record ``v`` as the result of ``op`` applied to ``args``.

    Returns the bare value when no argument is a ``Var``.
    """
    tape = _find_tape(args)
    if tape is None:
        return v
    _check(op, v)
    parents = tuple(a.index if isinstance(a, Var) else -1 for a in args)
    return tape._push(op, v, parents, vjp)


def lift(x, tape: Tape) -> Var:
    """Leaf node holding ``x``; its adjoint starts at zero."""
    if isinstance(x, Var):
        raise TypeError("lift() expects a plain number or array")
    v = np.float64(x) if np.ndim(x) == 0 else np.array(x, dtype=float)
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("lift: non-finite input")
    return tape._push("leaf", v, (), None)


def grad(output: Var, wrt: Iterable[Var]) -> list:
    """Derivatives of a scalar ``output`` with respect to each of ``wrt``.

    Variables the output does not depend on receive zeros.
    """
    wrt = list(wrt)
    if not isinstance(output, Var):
        return [np.zeros(np.shape(value(w))) if np.ndim(value(w)) else 0.0 for w in wrt]
    tape = output.tape
    for w in wrt:
        if not isinstance(w, Var) or w.tape is not tape:
            raise TapeError("gradient requested with respect to a variable on another tape")
    adj = tape.backward(output)
    out = []
    for w in wrt:
        g = adj[w.index] if w.index < len(adj) else None
        if g is None:
            g = np.zeros(w.shape)
        out.append(float(g) if np.ndim(g) == 0 else g)
    return out


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    return _node("add", _val(a) + _val(b), (a, b), lambda g: (g, g))


def sub(a, b):
    return _node("sub", _val(a) - _val(b), (a, b), lambda g: (g, -g))


def mul(a, b):
    av, bv = _val(a), _val(b)
    return _node("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b):
    av, bv = _val(a), _val(b)
    if np.any(bv == 0):
        raise DomainError("div: division by zero")
    out = av / bv
    return _node("div", out, (a, b), lambda g: (g / bv, -g * out / bv))


def neg(a):
    return _node("neg", -_val(a), (a,), lambda g: (-g,))


def square(a):
    av = _val(a)
    return _node("square", av * av, (a,), lambda g: (2.0 * g * av,))


def power(a, b):
    """``a ** b``. A non-constant exponent needs a positive base."""
    av, bv = _val(a), _val(b)
    if isinstance(b, Var):
        if np.any(av <= 0):
            raise DomainError("pow: variable exponent requires a positive base")
        out = av**bv
        return _node("pow", out, (a, b), lambda g: (g * bv * av ** (bv - 1.0), g * out * np.log(av)))
    out = av**bv
    return _node("pow", out, (a, b), lambda g: (g * bv * av ** (bv - 1.0), None))


# ---------------------------------------------------------- transcendental


def exp(a):
    out = np.exp(_val(a))
    return _node("exp", out, (a,), lambda g: (g * out,))


def log(a):
    av = _val(a)
    if np.any(av <= 0):
        raise DomainError("log: argument must be positive")
    return _node("log", np.log(av), (a,), lambda g: (g / av,))


def log1p(a):
    av = _val(a)
    if np.any(av <= -1):
        raise DomainError("log1p: argument must exceed -1")
    return _node("log1p", np.log1p(av), (a,), lambda g: (g / (1.0 + av),))


def sqrt(a):
    av = _val(a)
    if np.any(av <= 0):
        raise DomainError("sqrt: argument must be positive")
    out = np.sqrt(av)
    return _node("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def sin(a):
    av = _val(a)
    return _node("sin", np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a):
    av = _val(a)
    return _node("cos", np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def atan2(y, x):
    yv, xv = _val(y), _val(x)
    r2 = xv * xv + yv * yv
    if np.any(r2 == 0):
        raise DomainError("atan2: undefined at the origin")
    return _node("atan2", np.arctan2(yv, xv), (y, x), lambda g: (g * xv / r2, -g * yv / r2))


def tanh(a):
    out = np.tanh(_val(a))
    return _node("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = special.expit(_val(a))
    return _node("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    av = _val(a)
    out = np.logaddexp(0.0, av)
    return _node("softplus", out, (a,), lambda g: (g * special.expit(av),))


def max0(a):
    """ReLU; the subgradient at 0 is 0."""
    av = _val(a)
    return _node("max0", np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0),))


def silu(a):
    av = _val(a)
    s = special.expit(av)
    return _node("silu", av * s, (a,), lambda g: (g * (s + av * s * (1.0 - s)),))


def norm_pdf(a):
    av = _val(a)
    out = np.exp(-0.5 * av * av) / _SQRT_2PI
    return _node("norm_pdf", out, (a,), lambda g: (-g * av * out,))


def norm_cdf(a):
    av = _val(a)
    return _node(
        "norm_cdf",
        special.ndtr(av),
        (a,),
        lambda g: (g * np.exp(-0.5 * av * av) / _SQRT_2PI,),
    )


def clip(a, lo, hi):
    """Clamp to ``[lo, hi]`` (bounds are constants); zero slope outside."""
    av = _val(a)
    inside = (av >= lo) & (av <= hi)
    return _node("clip", np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    return _node(
        "where",
        np.where(cond, _val(a), _val(b)),
        (a, b),
        lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)),
    )


# ------------------------------------------------------------ array algebra


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if np.ndim(av) < 2 or np.ndim(bv) < 2:
        raise ValueError("matmul: operands need at least two dimensions")
    return _node(
        "matmul",
        av @ bv,
        (a, b),
        lambda g: (g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g),
    )


def vsum(a, axis=None, keepdims=False):
    av = _val(a)
    shape = np.shape(av)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node("sum", np.sum(av, axis=axis, keepdims=keepdims), (a,), vjp)


def vmean(a, axis=None, keepdims=False):
    av = _val(a)
    n = np.size(av) if axis is None else np.prod([np.shape(av)[ax] for ax in np.atleast_1d(axis)])
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    av = _val(a)
    old = np.shape(av)
    return _node("reshape", np.reshape(av, shape), (a,), lambda g: (np.reshape(g, old),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx):
    av = _val(a)
    shape = np.shape(av)
    basic = _is_basic_index(idx)

    def vjp(g):
        z = np.zeros(shape)
        if basic:
            z[idx] += g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _node("getitem", av[idx], (a,), vjp)


def concatenate(parts: Sequence, axis: int = 0):
    vals = [np.asarray(_val(p), dtype=float) for p in parts]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node("concatenate", np.concatenate(vals, axis=axis), tuple(parts), vjp)


def stack(parts: Sequence, axis: int = 0):
    n = len(parts)
    vals = [np.asarray(_val(p), dtype=float) for p in parts]
    shapes = [v.shape for v in vals]

    def vjp(g):
        pieces = np.split(g, n, axis=axis)
        return tuple(np.reshape(p, s) for p, s in zip(pieces, shapes))

    return _node("stack", np.stack(np.broadcast_arrays(*vals), axis=axis), tuple(parts), vjp)


def softmax(a, axis: int = -1):
    av = _val(a)
    z = av - np.max(av, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _node("softmax", out, (a,), vjp)


# ------------------------------------------------------------------ complex


class CVar:
    """Complex number as a pair of real (possibly taped) parts."""

    __slots__ = ("re", "im")
    __array_priority__ = 100.0

    def __init__(self, re, im=0.0) -> None:
        self.re = re
        self.im = im

    def __repr__(self) -> str:
        return f"CVar({value(self.re)!r}, {value(self.im)!r})"

    @property
    def value(self):
        return np.asarray(value(self.re)) + 1j * np.asarray(value(self.im))

    def __add__(self, o):
        return cadd(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return csub(self, o)

    def __rsub__(self, o):
        return csub(o, self)

    def __mul__(self, o):
        return cmul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return cdiv(self, o)

    def __rtruediv__(self, o):
        return cdiv(o, self)

    def __neg__(self):
        return CVar(neg(self.re), neg(self.im))

    def conj(self) -> "CVar":
        return CVar(self.re, neg(self.im))


def _c(z) -> CVar:
    if isinstance(z, CVar):
        return z
    if isinstance(z, (complex, np.complexfloating)) or np.iscomplexobj(z):
        return CVar(np.real(z), np.imag(z))
    return CVar(z, 0.0)


def _is_zero(x) -> bool:
    return not isinstance(x, Var) and np.ndim(x) == 0 and x == 0


def cadd(a, b) -> CVar:
    a, b = _c(a), _c(b)
    return CVar(add(a.re, b.re), a.im if _is_zero(b.im) else add(a.im, b.im))


def csub(a, b) -> CVar:
    a, b = _c(a), _c(b)
    return CVar(sub(a.re, b.re), a.im if _is_zero(b.im) else sub(a.im, b.im))


def cmul(a, b) -> CVar:
    a, b = _c(a), _c(b)
    if _is_zero(b.im):
        return CVar(mul(a.re, b.re), mul(a.im, b.re))
    if _is_zero(a.im):
        return CVar(mul(a.re, b.re), mul(a.re, b.im))
    return CVar(
        sub(mul(a.re, b.re), mul(a.im, b.im)),
        add(mul(a.re, b.im), mul(a.im, b.re)),
    )


def cdiv(a, b) -> CVar:
    a, b = _c(a), _c(b)
    den = add(square(b.re), square(b.im))
    re = add(mul(a.re, b.re), mul(a.im, b.im))
    im = sub(mul(a.im, b.re), mul(a.re, b.im))
    return CVar(div(re, den), div(im, den))


def cexp(z) -> CVar:
    z = _c(z)
    m = exp(z.re)
    return CVar(mul(m, cos(z.im)), mul(m, sin(z.im)))


def clog(z) -> CVar:
    """Principal logarithm, argument in (-pi, pi]."""
    z = _c(z)
    r2 = add(square(z.re), square(z.im))
    return CVar(mul(0.5, log(r2)), atan2(z.im, z.re))


def clog1p(z) -> CVar:
    """``log(1 + z)`` accurate for small ``|z|``."""
    z = _c(z)
    t = add(mul(2.0, z.re), add(square(z.re), square(z.im)))
    return CVar(mul(0.5, log1p(t)), atan2(z.im, add(1.0, z.re)))


def csqrt(z) -> CVar:
    """Principal square root (non-negative real part)."""
    return cexp(cmul(0.5, clog(z)))


def creal(z):
    return _c(z).re


def cimag(z):
    return _c(z).im
