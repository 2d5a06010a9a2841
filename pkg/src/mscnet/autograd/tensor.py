"""Dense tensor with reverse-mode differentiation.

A ``Tensor`` wraps a numpy array. Every differentiable operation returns a
fresh tensor that remembers its parents and a closure mapping the output
gradient to one gradient per parent. ``backward`` walks that record in
reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from ..errors import ShapeError, UsageError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_float_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is not None:
        return np.array(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
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

    def zero_grad(self) -> None:
        self.grad = None if not self.requires_grad else np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        return backward(self)


def make_result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Wrap ``data`` as an op output, recording ``grad_fn`` when needed.

    ``grad_fn(g)`` must return one array (or None) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = req
    out._parents = tuple(parents) if req else ()
    out._backward = grad_fn if req else None
    return out


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast shapes {a} and {b}") from exc


# -- elementwise ---------------------------------------------------------------


def _binary(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data
    return make_result(
        ad * bd, (a, b), lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape))
    )


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def grad_fn(g):
        ga = g / bd
        return unbroadcast(ga, ad.shape), unbroadcast(-ga * out, bd.shape)

    return make_result(out, (a, b), grad_fn)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return make_result(a.data * s, (a,), lambda g: (g * s,))


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,))


def tabs(a: Tensor) -> Tensor:
    ad = a.data
    # sign(0) == 0 gives the zero subgradient at the kink
    return make_result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    half = x.dtype.type(0.5)
    return half * (np.tanh(half * x) + 1)


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_np(a.data)
    return make_result(y, (a,), lambda g: (g * y * (1 - y),))


def texp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return make_result(y, (a,), lambda g: (g * y,))


def tlog(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return make_result(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=a.dtype)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(out, (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "abs": tabs,
    "relu": relu,
    "sigmoid": sigmoid,
    "sum": tsum,
    "mean": mean,
}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch one of the named elementwise/reduction kinds."""
    if kind == "scale":
        return scale(a, float(b))
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise UsageError(f"unknown elementwise kind {kind!r}") from None
    if kind in ("add", "sub", "mul"):
        if b is None:
            raise UsageError(f"{kind} needs a second operand")
        return fn(a, b)
    return fn(a)


# -- structural ------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return make_result(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary_mm(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dimensions")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")
    _broadcast_shape(ad.shape[:-2], bd.shape[:-2])
    _count_flops(2 * int(np.prod(np.broadcast_shapes(ad.shape[:-2], bd.shape[:-2]) or (1,)))
                 * ad.shape[-2] * ad.shape[-1] * bd.shape[-1])

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return make_result(ad @ bd, (a, b), grad_fn)


def _binary_mm(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, a)
    return a, b


# -- FLOP accounting -----------------------------------------------------------------

_flop_counters: list = []


def _count_flops(n: int) -> None:
    for c in _flop_counters:
        c[0] += n


@contextlib.contextmanager
def count_flops_ctx():
    """Yield a one-element list accumulating 2x multiply-accumulate counts."""
    counter = [0]
    _flop_counters.append(counter)
    try:
        yield counter
    finally:
        _flop_counters.remove(counter)


# -- reverse pass ----------------------------------------------------------------


def _topo_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> Dict[str, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns a map from parameter name to its accumulated gradient for the
    named parameters that were reached.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    reached = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.astype(node.dtype, copy=True) if node.grad is None else node.grad + g
            name = getattr(node, "name", None)
            if name is not None:
                reached[name] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return reached


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()
