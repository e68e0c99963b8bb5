"""Dense tensors with a reverse-mode gradient tape.

Every differentiable operation produces a new :class:`Tensor` whose ``_node``
records the inputs and a backward rule. Nodes carry a global sequence number,
so the set of nodes reachable from a loss, sorted by that number, is exactly
the tape in recording order. :func:`backward` walks it in reverse.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_SEQ = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for an operation."""


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


# Kink tracing: relu/max ops append their active pattern here while a trace is
# open, which lets gradcheck skip probes that straddle a non-differentiable point.
def _kink_trace() -> Optional[list]:
    return getattr(_state, "kink_trace", None)


@contextlib.contextmanager
def trace_kinks():
    prev = _kink_trace()
    trace: list = []
    _state.kink_trace = trace
    try:
        yield trace
    finally:
        _state.kink_trace = prev


def record_kink(pattern: np.ndarray) -> None:
    trace = _kink_trace()
    if trace is not None:
        trace.append(np.packbits(pattern.ravel()).tobytes() if pattern.dtype == bool
                     else pattern.tobytes())


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "seq")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_SEQ)


class Tensor:
    """A dense row-major array that may participate in the gradient tape."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    # reductions and shape ----------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def max(self, axis: int, keepdims: bool = False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def backward(self) -> dict:
        return backward(self)


def as_tensor(x: ArrayLike, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def _result(data: np.ndarray, op: str, inputs: tuple, backward_fn: Callable) -> Tensor:
    """Wrap ``data`` and append a tape node when any input requires grad."""
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, backward_fn)
    return out


# --------------------------------------------------------------------------
# broadcasting rules: exact match, a trailing 1-D bias, a 0-d scalar, or
# same-rank operands where one side has size-1 axes (per-channel scaling).
def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(b) == 1 and len(a) >= 1 and a[-1] == b[0]:
        return a
    if len(a) == 1 and len(b) >= 1 and b[-1] == a[0]:
        return b
    if len(a) == len(b):
        out = []
        ok_a = ok_b = True
        for da, db in zip(a, b):
            if da == db:
                out.append(da)
            elif da == 1:
                ok_b = False
                out.append(db)
            elif db == 1:
                ok_a = False
                out.append(da)
            else:
                break
        else:
            # only one operand may be the expanded one
            if ok_a or ok_b:
                return tuple(out)
    raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum(), dtype=grad.dtype)
    if len(shape) < grad.ndim:
        lead = grad.ndim - len(shape)
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_operands(op, a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, b.dtype if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, a.dtype)
    _broadcast_shape(op, a.shape, b.shape)
    return a, b


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_operands("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, "add", (a, b), bw)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_operands("sub", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, "sub", (a, b), bw)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_operands("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, "mul", (a, b), bw)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_operands("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _result(out, "div", (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    out = ad ** exponent

    def bw(g):
        return (g * exponent * ad ** (exponent - 1),)

    return _result(out, "pow", (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, "matmul", (a, b), bw)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out), "sum", (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    shape = a.shape
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _result(np.asarray(out, dtype=a.dtype), "mean", (a,), bw)


def max_(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    record_kink(idx.astype(np.int64))
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, np.expand_dims(idx, axis), g, axis=axis)
        return (full,)

    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return _result(out, "max", (a,), bw)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from exc
    return _result(out, "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    axis = axis % tensors[0].ndim
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or any(x != y for i, (x, y) in enumerate(zip(s, ref)) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {tuple(ref)} and {tuple(s)}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % a.ndim
    if not 0 <= start < stop <= a.shape[axis]:
        raise ShapeError(f"slice: range [{start}, {stop}) invalid for axis {axis} of {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _result(a.data[index], "slice", (a,), bw)


def split(a: Tensor, parts: int, axis: int = 1) -> list:
    n = a.shape[axis]
    if n % parts:
        raise ShapeError(f"split: axis {axis} of size {n} not divisible by {parts}")
    w = n // parts
    return [slice_axis(a, axis, i * w, (i + 1) * w) for i in range(parts)]


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), "log", (a,), lambda g: (g / ad,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _result(np.clip(ad, lo, hi), "clip", (a,), lambda g: (g * inside,))


def _check_finite(op: str, a: Tensor) -> None:
    if np.isnan(a.data).any():
        raise ValueError(f"{op}: NaN in input")


def relu(a: Tensor) -> Tensor:
    _check_finite("relu", a)
    mask = a.data > 0
    record_kink(mask)
    return _result(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    _check_finite("sigmoid", a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _result(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_finite("softmax", a)
    x = a.data
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, "softmax", (a,), bw)


# --------------------------------------------------------------------------
class Tape:
    """The recorded operations reachable from a root, in recording order."""

    def __init__(self, root: Tensor):
        nodes = {}
        stack = [root]
        seen = set()
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._node is not None:
                nodes[t._node.seq] = t
                stack.extend(t._node.inputs)
        self.outputs = [nodes[k] for k in sorted(nodes)]

    def __len__(self) -> int:
        return len(self.outputs)

    def __iter__(self):
        return iter(self.outputs)

    def ops(self) -> list:
        return [t._node.op for t in self.outputs]


def backward(loss: Tensor) -> dict:
    """Propagate d(loss)/d(.) to every leaf reachable from ``loss``.

    Leaf gradients are accumulated into ``leaf.grad`` and also returned as a
    dict keyed by ``id(leaf)``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves = {}
    if loss._node is None:
        if loss.requires_grad:
            leaves[id(loss)] = loss
    for out in reversed(list(Tape(loss))):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        node = out._node
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            ig = np.asarray(ig, dtype=inp.dtype)
            if ig.shape != inp.shape:
                raise ShapeError(f"{node.op}: backward produced {ig.shape} for input {inp.shape}")
            key = id(inp)
            grads[key] = grads[key] + ig if key in grads else ig
            if inp._node is None:
                leaves[key] = inp
    result = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros(leaf.shape, dtype=leaf.dtype)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        result[key] = g
    return result


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
