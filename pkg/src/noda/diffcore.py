"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation whose inputs are on it. Parameters are
registered on the tape by name, and :func:`backward` walks the records in
reverse to produce a ``{name: gradient}`` map, then clears the tape.

Typical use::

    with Tape() as tape:
        w = tape.param("w", np.array([1.0, 2.0]))
        loss = (w * w).sum()
    grads = backward(loss)      # {"w": array([2., 4.])}

Outside a tape, the same operations run as plain numpy computations.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DimensionError",
    "DomainError",
    "ContractError",
    "Tensor",
    "Tape",
    "apply_op",
    "backward",
    "grad_check",
    "GradCheckReport",
    "AdamState",
    "adam_init",
    "adam_step",
    "as_tensor",
    "OPS",
]


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class DomainError(ValueError):
    """A value left the domain of an operation (non-finite, log of <= 0, ...)."""


class ContractError(ValueError):
    """A caller broke an interface precondition."""


_local = threading.local()


def _active_tape():
    return getattr(_local, "tape", None)


class Tape:
    """Single-use record of operations for one differentiation pass."""

    def __init__(self):
        self.nodes = []  # (inputs, vjp) per on-tape tensor, index == tensor.tape_node
        self.params = {}
        self._prev = None

    def __enter__(self):
        self._prev = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False

    def param(self, name, value):
        """Register a named leaf and return it as an on-tape tensor."""
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice")
        t = Tensor(np.array(value, dtype=np.float64))
        t.tape_node = len(self.nodes)
        t._tape = self
        self.nodes.append(((), None))
        self.params[name] = t
        return t

    def record(self, out, inputs, vjp):
        out.tape_node = len(self.nodes)
        out._tape = self
        self.nodes.append((inputs, vjp))
        return out

    def clear(self):
        self.nodes = []
        self.params = {}


class Tensor:
    """n-dimensional float64 array, optionally attached to a tape."""

    __slots__ = ("data", "tape_node", "_tape")
    __array_priority__ = 100.0

    def __init__(self, data):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 \
            else np.asarray(data, dtype=np.float64)
        self.tape_node = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def on_tape(self):
        return self.tape_node is not None

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f", tape_node={self.tape_node}" if self.on_tape else ""
        return f"Tensor({self.data!r}{tag})"

    def __len__(self):
        return len(self.data)

    # operator sugar; every path goes through apply_op
    def __add__(self, other):
        return apply_op("add", self, other)

    def __radd__(self, other):
        return apply_op("add", other, self)

    def __sub__(self, other):
        return apply_op("sub", self, other)

    def __rsub__(self, other):
        return apply_op("sub", other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return apply_op("scale", self, c=float(other))
        return apply_op("mul", self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return apply_op("scale", self, c=float(other))
        return apply_op("mul", other, self)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ContractError("division is only supported by a constant")
        return apply_op("scale", self, c=1.0 / float(other))

    def __neg__(self):
        return apply_op("scale", self, c=-1.0)

    def __matmul__(self, other):
        return apply_op("matmul", self, other)

    def __rmatmul__(self, other):
        return apply_op("matmul", other, self)

    def __getitem__(self, key):
        return apply_op("slice", self, key=key)

    def sum(self, axis=None, keepdims=False):
        return apply_op("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply_op("mean", self, axis=axis, keepdims=keepdims)

    def tanh(self):
        return apply_op("tanh", self)

    def exp(self):
        return apply_op("exp", self)

    def log(self):
        return apply_op("log", self)

    def square(self):
        return apply_op("square", self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a, b, kind):
    if a.shape == b.shape:
        return a.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} do not conform") from None


# Each op returns (output array, vjp). vjp(g) -> tuple of input gradients.

def _op_add(a, b):
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))


def _op_sub(a, b):
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return a.data - b.data, lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))


def _op_mul(a, b):
    _broadcast_shape(a, b, "mul")
    x, y = a.data, b.data
    return x * y, lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape))


def _op_matmul(a, b):
    x, y = a.data, b.data
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
        raise DimensionError(f"matmul: shapes {x.shape} and {y.shape} do not conform")
    return x @ y, lambda g: (g @ y.T, x.T @ g)


def _op_tanh(a):
    y = np.tanh(a.data)
    return y, lambda g: (g * (1.0 - y * y),)


def _op_relu(a):
    mask = a.data > 0
    return np.where(mask, a.data, 0.0), lambda g: (g * mask,)


def _op_softplus(a):
    x = a.data
    y = np.logaddexp(0.0, x)
    return y, lambda g: (g * (0.5 * (1.0 + np.tanh(0.5 * x))),)


def _op_exp(a):
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return y, lambda g: (g * y,)


def _op_log(a):
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log of a non-positive value")
    with np.errstate(all="ignore"):
        y = np.log(x)
    return y, lambda g: (g / x,)


def _op_square(a):
    x = a.data
    return x * x, lambda g: (2.0 * g * x,)


def _op_sum(a, axis=None, keepdims=False):
    shape = a.shape
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return y, vjp


def _op_mean(a, axis=None, keepdims=False):
    shape = a.shape
    n = a.data.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])
    y = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)
    return y, vjp


def _op_concat(*ts, axis=-1):
    arrays = [t.data for t in ts]
    try:
        y = np.concatenate(arrays, axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from None
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return y, lambda g: tuple(np.split(g, bounds, axis=axis))


def _op_slice(a, key=None):
    shape = a.shape
    try:
        y = a.data[key]
    except IndexError as e:
        raise DimensionError(f"slice: {e}") from None

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, key, g) if _is_fancy(key) else out.__setitem__(key, g)
        return (out,)
    return np.array(y, dtype=np.float64), vjp


def _is_fancy(key):
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def _op_scale(a, c=1.0):
    return a.data * c, lambda g: (g * c,)


def _op_clip(a, lo=-np.inf, hi=np.inf):
    x = a.data
    mask = (x > lo) & (x < hi)
    return np.clip(x, lo, hi), lambda g: (g * mask,)


OPS = {
    "add": _op_add,
    "sub": _op_sub,
    "mul": _op_mul,
    "matmul": _op_matmul,
    "tanh": _op_tanh,
    "relu": _op_relu,
    "softplus": _op_softplus,
    "exp": _op_exp,
    "log": _op_log,
    "sum": _op_sum,
    "mean": _op_mean,
    "square": _op_square,
    "concat": _op_concat,
    "slice": _op_slice,
    "scale": _op_scale,
    "clip": _op_clip,
}


def apply_op(op_kind, *inputs, **kwargs):
    """Evaluate ``op_kind`` on ``inputs``; record it if any input is on the tape."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ContractError(f"unknown op {op_kind!r}") from None
    ts = tuple(x if isinstance(x, Tensor) else Tensor(x) for x in inputs)
    y, vjp = fn(*ts, **kwargs)
    # a single reduction propagates any NaN/Inf entry
    if not np.isfinite(np.add.reduce(y, axis=None)):
        if not np.isfinite(y).all():
            raise DomainError(f"{op_kind} produced a non-finite value")
    out = Tensor(y)
    for t in ts:
        if t.tape_node is not None:
            t._tape.record(out, ts, vjp)
            break
    return out


def backward(scalar_output):
    """Gradients of ``scalar_output`` w.r.t. every parameter on its tape.

    Unused parameters receive zeros. The tape is cleared afterwards.
    """
    out = scalar_output
    if out.data.size != 1 or out.data.ndim > 1:
        raise ContractError(f"backward needs a scalar output, got shape {out.shape}")
    tape = out._tape
    if tape is None:
        raise ContractError("output is not on an active tape")
    grads = [None] * len(tape.nodes)
    grads[out.tape_node] = np.ones_like(out.data)
    for idx in range(out.tape_node, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        inputs, vjp = tape.nodes[idx]
        if vjp is None:
            continue
        grads[idx] = None
        for t, gi in zip(inputs, vjp(g)):
            j = t.tape_node
            if j is None or t._tape is not tape:
                continue
            grads[j] = gi if grads[j] is None else grads[j] + gi
    result = {}
    for name in sorted(tape.params):
        t = tape.params[name]
        g = grads[t.tape_node]
        result[name] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)
    tape.clear()
    return result


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst: tuple = ()  # (name, flat index)


def grad_check(function, params, fd_step=1e-4, tol=1e-4):
    """Compare tape gradients of ``function(params) -> scalar`` with central differences.

    ``params`` maps names to arrays; ``function`` receives a map of names to
    tensors. Relative error uses the denominator ``max(|g_ad|, |g_fd|, 1e-8)``.
    """
    if fd_step <= 0:
        raise ContractError("fd_step must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    with Tape() as tape:
        watched = {k: tape.param(k, v) for k, v in params.items()}
        out = function(watched)
    g_ad = backward(out)

    def value(p):
        y = function({k: Tensor(v) for k, v in p.items()})
        y = float(np.asarray(y.data).reshape(-1)[0])
        if not np.isfinite(y):
            raise DomainError("function value is not finite")
        return y

    worst, max_err = (), 0.0
    for name in sorted(params):
        base = params[name]
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + fd_step
            up = value(params)
            flat[i] = orig - fd_step
            down = value(params)
            flat[i] = orig
            fd = (up - down) / (2.0 * fd_step)
            ad = g_ad[name].reshape(-1)[i]
            err = abs(ad - fd) / max(abs(ad), abs(fd), 1e-8)
            if not worst or err > max_err:
                max_err, worst = err, (name, i)
    return GradCheckReport(max_err, max_err <= tol, worst)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
        lr=lr, beta1=beta1, beta2=beta2, eps=eps,
    )


def adam_step(params, grads, state):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise ContractError(f"missing gradient for parameter {missing[0]!r}")
    b1, b2 = state.beta1, state.beta2
    t = state.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k in sorted(params):
        g = grads[k]
        if g.shape != params[k].shape:
            raise DimensionError(f"gradient for {k!r} has shape {g.shape}, expected {params[k].shape}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        new_p[k] = params[k] - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)
