"""Reverse-mode automatic differentiation over immutable numpy arrays.

A :class:`Tensor` is a node of the computation graph: an immutable value,
the name of the operation that produced it, and references to its inputs.
:func:`backward` walks the graph in reverse topological order and returns a
:class:`GradMap` keyed by node identity.
"""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

FLOAT_TYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand dimensions do not agree."""


def _as_array(value, dtype=None) -> np.ndarray:
    arr = np.array(value, dtype=dtype, copy=True)
    if arr.dtype.type not in FLOAT_TYPES:
        arr = arr.astype(np.float64 if dtype is None else dtype)
    arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable array value tracked by the autodiff graph."""

    __slots__ = ("data", "requires_grad", "op", "parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 op: str = "leaf", parents: tuple = (), backward=None):
        if isinstance(data, np.ndarray) and not data.flags.writeable and dtype in (None, data.dtype):
            self.data = data
        else:
            self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = parents
        self._backward = backward

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
        return float(self.data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    def __len__(self):
        return self.shape[0]

    # operator sugar; implementations live in learnet.ops
    def __add__(self, other):
        from learnet import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from learnet import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from learnet import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from learnet import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from learnet import ops
        return ops.mul(self, 1.0 / other)

    def __neg__(self):
        from learnet import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from learnet import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from learnet import ops
        return ops.getitem(self, index)

    def sum(self, axis=None):
        from learnet import ops
        return ops.sum(self, axis)

    def mean(self, axis=None):
        from learnet import ops
        return ops.mean(self, axis)

    def reshape(self, *shape):
        from learnet import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def make_node(data: np.ndarray, op: str, parents: tuple, backward) -> Tensor:
    """Wrap an op result; the backward closure maps the output gradient to one
    gradient (or None) per parent."""
    data = np.asarray(data)
    data.flags.writeable = False
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, op=op,
                  parents=parents if requires else (), backward=backward if requires else None)


class GradMap(dict):
    """Gradient arrays keyed by the :class:`Tensor` they belong to."""

    def __setitem__(self, node, grad):
        if not isinstance(node, Tensor):
            raise TypeError("GradMap keys must be Tensor nodes")
        if np.shape(grad) != node.shape:
            raise ShapeError(f"gradient shape {np.shape(grad)} != node shape {node.shape}")
        super().__setitem__(node, grad)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> GradMap:
    """Gradients of a scalar ``loss`` with respect to every node requiring grad."""
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    grads = GradMap()
    if not loss.requires_grad:
        return grads
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        grads[node] = g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = pg
    return grads


def gradient_pairs(f: Callable, x, h: float = 1e-6) -> dict:
    """``{name: (analytic, numeric)}`` gradients of ``f`` at ``x``.

    ``x`` is an array (reported under the name ``None``) or a mapping of name
    to array; ``f`` receives the matching Tensor (or dict of Tensors) and
    returns a scalar Tensor. The numeric gradient uses central differences
    with step ``h``. All evaluation happens in double precision.
    """
    if isinstance(x, Mapping):
        arrays = {k: np.array(v, dtype=np.float64) for k, v in x.items()}
        wrap = lambda arrs, grad: {k: Tensor(a, requires_grad=grad) for k, a in arrs.items()}
    else:
        arrays = {None: np.array(x, dtype=np.float64)}
        wrap = lambda arrs, grad: Tensor(arrs[None], requires_grad=grad)

    leaves = wrap(arrays, True)
    grads = backward(f(leaves))
    leaf_map = leaves if isinstance(leaves, dict) else {None: leaves}

    out = {}
    for name, base in arrays.items():
        analytic = grads.get(leaf_map[name])
        analytic = np.zeros_like(base) if analytic is None else analytic
        numeric = np.empty_like(base)
        flat, flat_base = numeric.reshape(-1), base.reshape(-1)
        for i in range(base.size):
            value = flat_base[i]
            flat_base[i] = value + h
            fp = f(wrap(arrays, False)).item()
            flat_base[i] = value - h
            fm = f(wrap(arrays, False)).item()
            flat_base[i] = value
            flat[i] = (fp - fm) / (2 * h)
        out[name] = (analytic, numeric)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|)``; 0 when both are identically zero."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    return 0.0 if scale == 0.0 else float(np.abs(analytic - numeric).max() / scale)


def check_gradient(f: Callable, x, h: float = 1e-6) -> float:
    """Max normwise relative error between ``backward`` and central differences
    over the inputs (see :func:`gradient_pairs`)."""
    return max((relative_error(a, n) for a, n in gradient_pairs(f, x, h).values()), default=0.0)
