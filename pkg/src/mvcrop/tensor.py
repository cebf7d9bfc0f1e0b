"""Float64 tensors with taped reverse-mode differentiation.

Execution is eager. While a ``Tape`` is active, every differentiable operation
appends one record (inputs, output, backward rule); because records are
appended in execution order they are already topologically sorted, so
``backward`` performs a single reverse sweep and accumulates gradients
additively into shared inputs. With no active tape the same operations run as
plain numpy math, which is how inference mode works.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, NumericError, ShapeError

Array = np.ndarray

_TAPES = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_TAPES, "stack", None)
    if stack is None:
        stack = []
        _TAPES.stack = stack
    return stack


class Tape:
    """Execution-ordered log of differentiable operations.

    The active-tape stack is thread-local so concurrent workers can train
    independent models without interleaving each other's records.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()


@dataclass
class _Record:
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: Callable[[Array], Sequence[Array | None]]


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array plus an accumulated-gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


class Parameter:
    """A named trainable leaf. ``init`` tags the initialisation policy."""

    __slots__ = ("tensor", "name", "init", "fan")

    def __init__(self, data, init: str = "fanin_uniform", fan: int | None = None) -> None:
        self.tensor = Tensor(data, requires_grad=True)
        self.name = ""
        self.init = init
        self.fan = fan

    @property
    def data(self) -> Array:
        return self.tensor.data

    @property
    def grad(self) -> Array | None:
        return self.tensor.grad


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(inputs: tuple[Tensor, ...], data: Array, backward) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.records.append(_Record(inputs, out, backward))
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting, gradients unbroadcast back)
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        (a, b),
        a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        (a, b),
        a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        (a, b),
        a.data / b.data,
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make((a,), -a.data, lambda g: (-g,))


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return _make(
        (a, b),
        a.data @ b.data,
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def conv1d_same(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded stride-1 convolution over time. x: [T,Ci] or [B,T,Ci]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 3:
        raise ShapeError(f"conv kernels must be [Co,Ci,k], got {w.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise ConfigError(f"conv kernel width must be odd for same padding, got {k}")
    squeeze = x.ndim == 2
    if squeeze:
        x3 = x.data[None, :, :]
    elif x.ndim == 3:
        x3 = x.data
    else:
        raise ShapeError(f"conv input must be [T,Ci] or [B,T,Ci], got {x.shape}")
    if x3.shape[2] != w.shape[1]:
        raise ShapeError(f"conv channel mismatch: input {x3.shape[2]}, kernels {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv bias must be [Co]={w.shape[0]}, got {b.shape}")

    y = kernels.conv1d_forward(x3, w.data, b.data)

    def backward(g: Array):
        g3 = g[None, :, :] if squeeze else g
        gx = kernels.conv1d_grad_input(g3, w.data)
        gw = kernels.conv1d_grad_kernel(x3, g3, k)
        gb = g3.sum(axis=(0, 1))
        return (gx[0] if squeeze else gx, gw, gb)

    return _make((x, w, b), y[0] if squeeze else y, backward)


# ---------------------------------------------------------------------------
# activations and softmax
# ---------------------------------------------------------------------------

def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make((x,), out, lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make((x,), out, lambda g: (g * (1.0 - out * out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make((x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def activation(x, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation kind {kind!r}") from None
    return fn(x)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g: Array):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _make((x,), y, backward)


def safe_log(x, floor: float = 1e-12) -> Tensor:
    """log(max(x, floor)); gradient is zero on the clamped region."""
    if floor <= 0:
        raise ConfigError("safe_log floor must be positive")
    x = as_tensor(x)
    clamped = np.maximum(x.data, floor)
    mask = x.data > floor
    return _make((x,), np.log(clamped), lambda g: (g * mask / clamped,))


# ---------------------------------------------------------------------------
# shape and reduction ops
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    return _make((x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def flatten(x) -> Tensor:
    x = as_tensor(x)
    return reshape(x, (x.size,))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    data = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    return _make((x,), data, lambda g: (_unbroadcast(g, x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of zero tensors")
    sizes = [t.shape[axis] for t in ts]
    data = np.concatenate([t.data for t in ts], axis=axis)

    def backward(g: Array):
        return [np.ascontiguousarray(piece) for piece in np.split(g, np.cumsum(sizes)[:-1], axis=axis)]

    return _make(tuple(ts), data, backward)


def narrow(x, start: int, stop: int, axis: int = 0) -> Tensor:
    """Contiguous slice along one axis; backward scatters into zeros."""
    x = as_tensor(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g: Array):
        gx = np.zeros(x.shape)
        gx[index] = g
        return (gx,)

    return _make((x,), x.data[index].copy(), backward)


def split(x, sizes: Iterable[int], axis: int = 0) -> list[Tensor]:
    sizes = list(sizes)
    x = as_tensor(x)
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not cover axis {axis} of {x.shape}")
    out, off = [], 0
    for s in sizes:
        out.append(narrow(x, off, off + s, axis))
        off += s
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


def _reduce_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _reduce_axes(axis, x.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g: Array):
        if not keepdims:
            shape = list(x.shape)
            for a in axes:
                shape[a] = 1
            g = g.reshape(shape)
        return (np.ascontiguousarray(np.broadcast_to(g, x.shape)),)

    return _make((x,), data, backward)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _reduce_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    data = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g: Array):
        if not keepdims:
            shape = list(x.shape)
            for a in axes:
                shape[a] = 1
            g = g.reshape(shape)
        return (np.ascontiguousarray(np.broadcast_to(g, x.shape)) / count,)

    return _make((x,), data, backward)


def reduce_max(x, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the subgradient routes to the first argmax position."""
    x = as_tensor(x)
    axes = _reduce_axes(axis, x.ndim)
    if len(axes) != x.ndim and len(axes) != 1:
        raise ShapeError("reduce_max supports a single axis or full reduction")
    data = x.data.max(axis=axes if len(axes) > 1 else axes[0], keepdims=keepdims)

    def backward(g: Array):
        gx = np.zeros(x.shape)
        if len(axes) == x.ndim:
            idx = np.unravel_index(np.argmax(x.data), x.shape)
            gx[idx] = np.asarray(g).reshape(())
        else:
            a = axes[0]
            idx = np.expand_dims(np.argmax(x.data, axis=a), a)
            gg = g if keepdims else np.expand_dims(g, a)
            np.put_along_axis(gx, idx, gg, axis=a)
        return (gx,)

    return _make((x,), data, backward)


_REDUCERS = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(x, op: str, axis=None, keepdims: bool = False) -> Tensor:
    try:
        fn = _REDUCERS[op]
    except KeyError:
        raise ConfigError(f"unknown reduction {op!r}") from None
    return fn(x, axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------------------
# normalisation and dropout
# ---------------------------------------------------------------------------

def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Normalise over all axes but the last using batch statistics.

    Returns ``(out, batch_mean, batch_var)``; the caller owns the running
    buffers. Biased variance, epsilon inside the square root.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 2:
        raise ShapeError(f"batch norm input must be at least 2-d, got {x.shape}")
    if x.shape[0] < 2:
        raise ShapeError("batch norm in train mode needs a batch of at least 2")
    axes = tuple(range(x.ndim - 1))
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * ivar
    out = gamma.data * xhat + beta.data

    def backward(g: Array):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=axes, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
        dx = ivar * (dxhat - m1 - xhat * m2)
        return (dx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return _make((x, gamma, beta), out, backward), mean, var


def batch_norm_infer(
    x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Array, running_var: Array,
    eps: float = 1e-5,
) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    ivar = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean) * ivar
    out = gamma.data * xhat + beta.data
    axes = tuple(range(x.ndim - 1))

    def backward(g: Array):
        return (g * gamma.data * ivar, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return _make((x, gamma, beta), out, backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row over the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.shape[-1] != gain.shape[-1]:
        raise ShapeError(f"layer norm width mismatch: {x.shape} vs gain {gain.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * ivar
    out = gain.data * xhat + bias.data
    axes = tuple(range(x.ndim - 1))

    def backward(g: Array):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = ivar * (dxhat - m1 - xhat * m2)
        return (dx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return _make((x, gain, bias), out, backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, mode: str) -> Tensor:
    """Inverted dropout: train mode scales kept units by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if mode == "infer" or rate == 0.0:
        return x
    if mode != "train":
        raise ConfigError(f"unknown mode {mode!r}")
    if rng is None:
        raise ConfigError("dropout in train mode needs a random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make((x,), x.data * keep, lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# backward sweep and gradient checking
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape) -> None:
    """Reverse sweep over the tape, accumulating into ``.grad`` slots."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is None:
            continue
        grads = rec.backward(g)
        for t, gi in zip(rec.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=np.float64).reshape(t.shape)
            t.grad = gi if t.grad is None else t.grad + gi


@dataclass
class GradCheckResult:
    max_rel_err: float
    ok: bool


def grad_check(
    f: Callable[[Tensor], Tensor], x, step: float = 1e-5, tol: float = 1e-4
) -> GradCheckResult:
    """Compare analytic gradients of scalar ``f`` against central differences.

    The relative error denominator is floored at 1e-6 so exactly-zero
    gradients compare against finite-difference noise sanely.
    """
    base = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64).copy()
    leaf = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(leaf)
    if y.size != 1:
        raise ShapeError("grad_check target must produce a scalar")
    if not np.isfinite(y.data).all():
        raise NumericError("non-finite value in grad_check forward pass")
    backward(y, tape)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(Tensor(base.copy())).data
        flat[i] = orig - step
        lo = f(Tensor(base.copy())).data
        flat[i] = orig
        if not (np.isfinite(hi).all() and np.isfinite(lo).all()):
            raise NumericError("non-finite value in grad_check probe")
        num_flat[i] = (float(hi) - float(lo)) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    max_rel = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
    return GradCheckResult(max_rel_err=max_rel, ok=max_rel < tol)
