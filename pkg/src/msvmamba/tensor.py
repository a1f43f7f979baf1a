"""Dense tensors with define-by-run reverse-mode differentiation.

Every op builds its output eagerly and, when any input participates in
differentiation, records its parents plus a closure mapping the output
gradient to one gradient per parent. :func:`backward` linearises the graph
into a tape (topological order) and replays it in reverse.
"""
from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractViolation, ShapeError

_state = {"dtype": np.float32, "grad_enabled": True}
DEBUG = bool(os.environ.get("MSVM_DEBUG"))


def get_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        if arr.ndim > 4:
            raise ShapeError(f"tensors are limited to rank 4, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{rg})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self)))

    def __rsub__(self, other):
        return add(_wrap(other, self), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def as_tensor(x) -> Tensor:
    return _wrap(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    if DEBUG and not np.all(np.isfinite(data)):
        finite_in = all(np.all(np.isfinite(p.data)) for p in parents)
        if finite_in:
            raise FloatingPointError(f"op {op} produced non-finite values from finite inputs")
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# -- autodiff driver -----------------------------------------------------

def build_tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of differentiable nodes reachable from root."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring leaf that ``loss`` depends on.

    Gradients accumulate into existing ``.grad`` arrays.
    """
    if loss.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- broadcasting helpers ------------------------------------------------

def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) == 0 or int(np.prod(a)) == 1 and len(a) <= len(b):
        return b
    if len(b) == 0 or int(np.prod(b)) == 1 and len(b) <= len(a):
        return a
    if len(a) != len(b):
        raise ShapeError(f"incompatible shapes {a} and {b}: broadcasting needs equal rank")
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"incompatible shapes {a} and {b}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) < g.ndim:
        g = g.sum(axis=tuple(range(g.ndim - len(shape))))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ops -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _make(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    return _make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid_np(x)

    def bw(g):
        return (g * s * (1 + x * (1 - s)),)

    return _make(x * s, (a,), bw, "silu")


def softplus_np(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0, x).astype(x.dtype, copy=False)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    return _make(softplus_np(x), (a,), lambda g: (g * _sigmoid_np(x),), "softplus")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


# -- reductions and shape ops ----------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(tsum(a, axes, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def flip(a: Tensor, axis: int) -> Tensor:
    out = np.ascontiguousarray(np.flip(a.data, axis))
    return _make(out, (a,), lambda g: (np.flip(g, axis),), "flip")


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] += g
        return (full,)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), bw, "getitem")


def pad(a: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` holds one (before, after) pair per axis."""
    widths = tuple(tuple(w) for w in widths)
    if all(w == (0, 0) for w in widths):
        return a
    sl = tuple(slice(b, b + n) for (b, _), n in zip(widths, a.shape))
    return _make(np.pad(a.data, widths), (a,), lambda g: (g[sl],), "pad")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise ShapeError(
                f"concat along axis {axis} needs equal extents elsewhere, got {ref} and {t.shape}"
            )
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    out, lo = [], 0
    for s in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(lo, lo + s)
        out.append(getitem(a, tuple(sl)))
        lo += s
    if lo != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover extent {a.shape[axis]}")
    return out


def stack_scalars(items: Iterable[Tensor]) -> Tensor:
    return concat([reshape(t, (1,)) for t in items], axis=0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), bw, "matmul")


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def expand(a: Tensor, shape) -> Tensor:
    """Broadcast singleton axes of ``a`` up to ``shape`` (same rank)."""
    shape = tuple(shape)
    if _broadcast_shape(a.shape, shape) != shape:
        raise ShapeError(f"cannot expand {a.shape} to {shape}")
    src = a.shape
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return _make(out, (a,), lambda g: (_unbroadcast(g, src),), "expand")


def tmax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal element."""
    axis = axis % a.ndim
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, idx, g if keepdims else np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out if keepdims else np.squeeze(out, axis), (a,), bw, "max")
