"""Reverse-mode automatic differentiation over dense float64 arrays.

Every primitive records its parents and an adjoint closure on the output
tensor.  Tensors get a monotonically increasing id at creation, so sorting
the reachable graph by id in descending order is a valid reverse
topological order; :func:`backward` visits each node exactly once.

Non-differentiable kinks (``clamp``, ``maximum``, ``max``) use subgradient 0
at the boundary / at ties.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "Tensor",
    "tensor",
    "constant",
    "backward",
    "grad_check",
    "GradCheckReport",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "sum",
    "mean",
    "exp",
    "log",
    "sin",
    "cos",
    "sqrt",
    "maximum",
    "max",
    "clamp",
    "clamp_min",
    "sigmoid",
    "tanh",
    "softmax",
    "concat",
    "gather",
    "reshape",
    "transpose",
    "where",
    "norm",
    "cosine_similarity",
]

DIV_EPS = 1e-12

_ids = itertools.count()


class AutodiffError(ValueError):
    """Raised on shape mismatches and invalid numeric domains."""


class Tensor:
    __array_priority__ = 1000
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_adjoint", "op", "id")

    def __init__(self, data, requires_grad=False, _parents=(), _adjoint=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._adjoint = _adjoint
        self.op = op
        self.id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise AutodiffError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return len(self.data)

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, adjoint, op) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _adjoint=adjoint if needs else None, op=op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise AutodiffError(f"shape mismatch: {shapes}") from exc


# --------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def adjoint(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), adjoint, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def adjoint(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), adjoint, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def adjoint(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), adjoint, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    if np.any(np.abs(b.data) < DIV_EPS):
        raise AutodiffError(f"division by a value with magnitude < {DIV_EPS:g}")
    out = a.data / b.data

    def adjoint(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _make(out, (a, b), adjoint, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send gradient to neither side."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ga_mask = a.data > b.data
    gb_mask = b.data > a.data

    def adjoint(g):
        return _unbroadcast(g * ga_mask, a.shape), _unbroadcast(g * gb_mask, b.shape)

    return _make(np.maximum(a.data, b.data), (a, b), adjoint, "maximum")


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``.  ``cond`` is a constant mask."""
    a, b = _as_tensor(a), _as_tensor(b)
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    _broadcast_shape(cond.shape, a.shape, b.shape)

    def adjoint(g):
        return _unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)

    return _make(np.where(cond, a.data, b.data), (a, b), adjoint, "where")


# --------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise AutodiffError("matmul needs operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise AutodiffError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])
    out = np.matmul(a.data, b.data)

    def adjoint(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), adjoint, "matmul")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def adjoint(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), adjoint, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = np.mean(a.data, axis=axes, keepdims=keepdims)  # bitwise equal to numpy's mean

    def adjoint(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(out, (a,), adjoint, "mean")


def max(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    """Reduce-max.  A unique maximum receives the gradient; tied maxima get 0."""
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out_keep = a.data.max(axis=axes, keepdims=True)
    hit = a.data == out_keep
    unique = hit.sum(axis=axes, keepdims=True) == 1
    mask = hit & unique
    out = out_keep if keepdims else np.squeeze(out_keep, axis=axes)

    def adjoint(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.where(mask, g, 0.0),)

    return _make(out, (a,), adjoint, "max")


# --------------------------------------------------------------------------
# elementwise unary ops


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise AutodiffError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sin(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise AutodiffError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def adjoint(g):
        if np.any(out < DIV_EPS):
            raise AutodiffError("sqrt gradient at zero")
        return (0.5 * g / out,)

    return _make(out, (a,), adjoint, "sqrt")


def clamp(a, lo=None, hi=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        out = np.maximum(out, lo)
        inside &= a.data > lo
    if hi is not None:
        out = np.minimum(out, hi)
        inside &= a.data < hi
    return _make(out, (a,), lambda g: (g * inside,), "clamp")


def clamp_min(a, lo) -> Tensor:
    return clamp(a, lo=lo)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softmax(a, axis=-1, mask=None) -> Tensor:
    """Softmax along ``axis``.

    ``mask`` (boolean, broadcastable) restricts the normalisation to the
    entries where it is True; masked entries get weight exactly 0 and no
    gradient.  Every slice must keep at least one unmasked entry.
    """
    a = _as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=axis)):
            raise AutodiffError("softmax slice with every entry masked")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def adjoint(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), adjoint, "softmax")


# --------------------------------------------------------------------------
# structural ops


def concat(tensors: Sequence, axis=0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise AutodiffError(str(exc)) from exc
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def adjoint(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(ts), adjoint, "concat")


def gather(a, index, axis=0) -> Tensor:
    """``np.take`` along ``axis`` with an integer index array (repeats allowed)."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    n = a.shape[axis]
    if index.size and (index.min() < -n or index.max() >= n):
        raise AutodiffError("gather index out of bounds")
    out = np.take(a.data, index, axis=axis)

    def adjoint(g):
        full = np.zeros(a.shape)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + index.ndim)), list(range(index.ndim)))
        np.add.at(moved, index, gm)
        return (full,)

    return _make(out, (a,), adjoint, "gather")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise AutodiffError(str(exc)) from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


# --------------------------------------------------------------------------
# composites with exact adjoints


def norm(a, axis=-1, keepdims=False) -> Tensor:
    """Euclidean norm along ``axis``."""
    a = _as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))

    def adjoint(g):
        if np.any(out < DIV_EPS):
            raise AutodiffError("norm gradient at the zero vector")
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * a.data / out,)

    value = out if keepdims else np.squeeze(out, axis=axis)
    return _make(value, (a,), adjoint, "norm")


def cosine_similarity(a, b, axis=-1) -> Tensor:
    """Cosine of the angle between ``a`` and ``b`` along ``axis``; zero vectors raise."""
    a, b = _as_tensor(a), _as_tensor(b)
    dot = sum(a * b, axis=axis)
    return div(dot, norm(a, axis=axis) * norm(b, axis=axis))


# --------------------------------------------------------------------------
# backward pass


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every tensor that requires it with d(root)/d(tensor)."""
    if root.size != 1:
        raise AutodiffError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    nodes = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.id in nodes:
            continue
        nodes[t.id] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    grads = {root.id: np.ones(root.shape)}
    for tid in sorted(nodes, reverse=True):
        t = nodes[tid]
        g = grads.pop(tid, None)
        if g is None:
            g = np.zeros(t.shape)
        t.grad = g
        if t._adjoint is None:
            continue
        parent_grads = t._adjoint(g)
        for p, pg in zip(t._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg


# --------------------------------------------------------------------------
# finite-difference check


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-4, tol: float = 1e-4,
               indices: Optional[np.ndarray] = None) -> GradCheckReport:
    """Compare the autodiff gradient of scalar ``f`` at ``x`` with central differences.

    The relative error is ``max|analytic - numeric| / max(|analytic|_inf, |numeric|_inf)``
    over the checked coordinates (``indices`` into the flattened ``x``; all by default).
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    backward(out)
    analytic_full = np.zeros_like(x0) if xt.grad is None else xt.grad
    flat_idx = np.arange(x0.size) if indices is None else np.asarray(indices, dtype=np.intp)
    analytic = analytic_full.reshape(-1)[flat_idx]
    numeric = np.empty(len(flat_idx))
    for k, i in enumerate(flat_idx):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        numeric[k] = (fp - fm) / (2.0 * h)
    scale = np.max(np.abs(np.concatenate([analytic, numeric]))) if len(flat_idx) else 0.0
    err = float(np.max(np.abs(analytic - numeric)) / scale) if scale > 0 else 0.0
    return GradCheckReport(err, tol, analytic, numeric)
