"""Dense tensors with tape-based reverse-mode autodiff.

Operations only record onto a :class:`Tape` when one is active on the current
thread and at least one input requires a gradient. Without an active tape every
operation is a plain numpy computation, which is what inference uses.

    >>> w = Tensor(np.eye(2), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = matmul(w, w).sum()
    ...     tape.backward(loss)
    >>> w.grad
    array([[2., 2.],
           [2., 2.]])
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_state = threading.local()

DTYPES = {"test": np.float64, "fast": np.float32}


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


def _get(name, default):
    if not hasattr(_state, name):
        setattr(_state, name, default() if callable(default) else default)
    return getattr(_state, name)


def default_dtype():
    return DTYPES[_get("mode", "test")]


@contextlib.contextmanager
def precision(mode: str):
    """Switch between ``"test"`` (float64) and ``"fast"`` (float32) on this thread."""
    if mode not in DTYPES:
        raise ValueError(f"unknown precision mode {mode!r}")
    prev = _get("mode", "test")
    _state.mode = mode
    try:
        yield
    finally:
        _state.mode = prev


# --------------------------------------------------------------------------
# multiply-add instrumentation


@dataclass
class MacCounter:
    macs: int = 0
    by_tag: dict = field(default_factory=dict)

    def add(self, n: int):
        self.macs += n
        tag = _get("mac_tag", None)
        if tag is not None:
            self.by_tag[tag] = self.by_tag.get(tag, 0) + n


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count every multiply-add executed by matrix products on this thread."""
    counter = MacCounter()
    stack = _get("counters", list)
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


@contextlib.contextmanager
def mac_tag(tag: str):
    prev = _get("mac_tag", None)
    _state.mac_tag = tag
    try:
        yield
    finally:
        _state.mac_tag = prev


def _count(n: int):
    for c in _get("counters", list):
        c.add(int(n))


# --------------------------------------------------------------------------
# tensor and tape


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


@dataclass
class _Node:
    out: Tensor
    parents: tuple
    backward: Callable


class Tape:
    """Ordered record of the operations executed while it is active.

    A tape belongs to one forward pass on one thread. ``backward`` walks the
    record in reverse, which is a reverse topological order because an
    operation can only consume tensors that already exist.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _get("tapes", list).append(self)
        return self

    def __exit__(self, *exc):
        _get("tapes", list).remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor, grad: np.ndarray | None = None):
        if grad is None:
            if loss.size != 1:
                raise ShapeError(f"backward needs a scalar or an explicit grad, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        loss.grad = grad if loss.grad is None else loss.grad + grad
        for node in reversed(self.nodes):
            g_out = node.out.grad
            if g_out is None:
                continue
            for parent, g in zip(node.parents, node.backward(g_out)):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.shape:
                    g = _unbroadcast(g, parent.shape)
                parent.grad = g.copy() if parent.grad is None else parent.grad + g

    def reset(self):
        self.nodes.clear()


def _active_tape() -> Tape | None:
    tapes = _get("tapes", list)
    return tapes[-1] if tapes else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording on every tape of this thread."""
    saved = _get("tapes", list)
    _state.tapes = []
    try:
        yield
    finally:
        _state.tapes = saved


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append(_Node(out, tuple(parents), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    return _make(out, "add", (a, b), lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    return _make(out, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if isinstance(b.data, np.ndarray) and not b.requires_grad and np.any(b.data == 0):
        raise NonFiniteError("div: division by zero")
    out = a.data / b.data
    return _make(out, "div", (a, b), lambda g: (g / b.data, -g * a.data / b.data**2))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log of non-positive value")
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def clamp_max(a: Tensor, hi: float) -> Tensor:
    mask = a.data <= hi
    return _make(np.minimum(a.data, hi), "clamp_max", (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _make(out, "gelu", (a,), backward)


# --------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out), "sum", (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum_(a, axes, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a: Tensor, idx) -> Tensor:
    out = np.array(a.data[idx])

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, slice, type(Ellipsis))) or i is None for i in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(out, "getitem", (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {err} (shapes {[t.shape for t in tensors]})") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, "concat", tensors, backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape).copy()
    return _make(out, "broadcast_to", (a,), lambda g: (_unbroadcast(g, a.shape),))


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, numpy broadcasting on the rest."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul batch extents do not broadcast: {a.shape} x {b.shape}") from None
    _count(out.size * a.shape[-1])

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _make(out, "matmul", (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ w + b``."""
    din, dout = w.shape
    if x.shape[-1] != din:
        raise ShapeError(f"linear: input extent {x.shape[-1]} does not match weight {w.shape}")
    if b is not None and b.shape != (dout,):
        raise ShapeError(f"linear: bias shape {b.shape} does not match weight {w.shape}")
    x2 = x.data.reshape(-1, din)
    out = x2 @ w.data
    _count(x2.shape[0] * din * dout)
    if b is not None:
        out = out + b.data
    out = out.reshape(x.shape[:-1] + (dout,))
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, dout)
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, "linear", parents, backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, "softmax", (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (x,), backward)


LN_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: last extent {d} vs gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dy = g * gain.data
            gx = inv * (dy - dy.mean(axis=-1, keepdims=True) - xhat * (dy * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out, "layer_norm", (x, gain, bias), backward)


NORM_FLOOR = 1e-12


def l2_normalize(x: Tensor, return_mask: bool = False):
    """Scale every vector on the last axis to unit length.

    Vectors with norm below ``NORM_FLOOR`` pass through unchanged; with
    ``return_mask=True`` a boolean array marking them is returned as well.
    """
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    degenerate = norm < NORM_FLOOR
    safe = np.where(degenerate, 1.0, norm)
    y = x.data / safe
    out_data = np.where(degenerate, x.data, y)

    def backward(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        gx = (g - y * proj) / safe
        return (np.where(degenerate, g, gx),)

    out = _make(out_data, "l2_normalize", (x,), backward)
    if return_mask:
        return out, degenerate[..., 0]
    return out


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(out, "embedding", (table,), backward)


# --------------------------------------------------------------------------
# finite-difference checking


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to ``x.data`` (perturbed in place)."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn().item()
            flat[i] = orig - eps
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a-b| / max(|a|, |b|)``; 0 when both vanish."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom < 1e-300:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Largest relative error between tape gradients and central differences."""
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn()
        tape.backward(out)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, rel_error(analytic, numerical_grad(fn, t, eps)))
    return worst
