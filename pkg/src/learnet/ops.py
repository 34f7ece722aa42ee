"""Differentiable operations on :class:`~learnet.autodiff.Tensor`.

Images are channel-last. Convolution-like ops accept a single image
``(H, W, C)`` or a batch ``(N, H, W, C)`` and return the same rank.
"""
from __future__ import annotations

import numpy as np

from learnet._backend import kernels
from learnet.autodiff import ShapeError, Tensor, as_tensor, make_node


def _pair(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.dtype != b.dtype:
        # python scalars arrive as float64; keep the tensor's own precision
        if a.op == "leaf" and not a.requires_grad and a.ndim == 0:
            a = Tensor(a.data, dtype=b.dtype)
        elif b.op == "leaf" and not b.requires_grad and b.ndim == 0:
            b = Tensor(b.data, dtype=a.dtype)
    return a, b


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b, name):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    return make_node(a.data + b.data, "add", (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    return make_node(a.data - b.data, "sub", (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    return make_node(a.data * b.data, "mul", (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, "neg", (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data * a.data, "square", (a,), lambda g: (2 * a.data * g,))


def relu(a) -> Tensor:
    """max(a, 0); the subgradient at 0 is 0."""
    a = as_tensor(a)
    mask = a.data > 0
    return make_node(np.where(mask, a.data, 0).astype(a.dtype), "relu", (a,),
                     lambda g: (g * mask,))


def absolute(a) -> Tensor:
    """|a|; the subgradient at 0 is 0."""
    a = as_tensor(a)
    return make_node(np.abs(a.data), "abs", (a,), lambda g: (g * np.sign(a.data),))


def logistic_loss(score, label) -> Tensor:
    """log(1 + exp(-label * score)), elementwise and overflow-free."""
    score = as_tensor(score)
    label = np.asarray(label.data if isinstance(label, Tensor) else label, dtype=score.dtype)
    margin = -label * score.data
    out = np.logaddexp(0, margin).astype(score.dtype)

    def grad(g):
        # d/ds log(1+e^m) = -label * sigmoid(m)
        sig = np.exp(-np.logaddexp(0, -margin))
        return (_unbroadcast(g * -label * sig, score.shape),)

    return make_node(out, "logistic_loss", (score,), grad)


# ---------------------------------------------------------------- reductions

def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def grad(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(np.asarray(out, dtype=a.dtype), "sum", (a,), grad)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis), 1.0 / count)


def norm(a, axis=-1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at the origin is 0."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis))

    def grad(g):
        safe = np.where(out > 0, out, 1)
        scale = np.where(out > 0, g / safe, 0)
        return (a.data * np.expand_dims(scale, axis),)

    return make_node(out.astype(a.dtype), "norm", (a,), grad)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return make_node(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def flatten(a) -> Tensor:
    """Collapse every axis after the first (batch) axis."""
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_node(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inverse),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def grad(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(full, index, g)
        return (full,)

    return make_node(a.data[index], "getitem", (a,), grad)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_node(out, "concat", tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=axis)))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Standard ``a @ b`` for 1-D/2-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim > 2 or b.ndim > 2 or a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul supports 1-D and 2-D operands only")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def grad(g):
        a2 = a.data if a.ndim == 2 else a.data[None, :]
        b2 = b.data if b.ndim == 2 else b.data[:, None]
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        return ((g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape))

    return make_node(a.data @ b.data, "matmul", (a, b), grad)


def linear(x, weight, bias=None, batch_invariant: bool = True) -> Tensor:
    """Row-wise ``y = W x + b`` for ``x (N, d)``, ``W (k, d)``.

    Routed through the convolution kernel, so by default each row is computed
    the same way whatever the batch size. ``batch_invariant=False`` uses one
    matrix product for the whole batch, which is much faster for large ``W``
    but may round rows differently depending on their batch.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects x (N, d) and W (k, d), got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input has {x.shape[1]} features, weight expects {weight.shape[1]}")
    n, d = x.shape
    k = weight.shape[0]
    if not batch_invariant:
        if x.dtype != weight.dtype:
            raise ShapeError(f"linear: dtype mismatch {x.dtype} vs {weight.dtype}")
        xd, wd = x.data, weight.data
        y = make_node(xd @ wd.T, "linear", (x, weight),
                      lambda g: (g @ wd if x.requires_grad else None,
                                 g.T @ xd if weight.requires_grad else None))
        return y if bias is None else add(y, bias)
    kernel = reshape(transpose(weight), (1, 1, d, k))
    y = conv2d(reshape(x, (n, 1, 1, d)), kernel, bias, batch_invariant)
    return reshape(y, (n, k))


# ---------------------------------------------------------------- convolutions

def _batched(x: Tensor, name: str):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected (H, W, C) or (N, H, W, C), got {x.shape}")
    return x, False


def _contig(arr):
    return np.ascontiguousarray(arr)


def conv2d(x, k, bias=None, batch_invariant: bool = True) -> Tensor:
    """Valid, stride-1 cross-correlation (no kernel flip) plus per-channel bias.

    ``x (N,H,W,Q)``, ``k (F,F,Q,P)`` and ``bias (P,)`` give ``(N,H-F+1,W-F+1,P)``.
    With ``batch_invariant`` (the default) every sample is computed on its own
    so results do not depend on the rest of the batch. Gradients always use
    the batched kernel.
    """
    x, k = as_tensor(x), as_tensor(k)
    x, single = _batched(x, "conv2d")
    if k.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be (F, F, Q, P), got {k.shape}")
    n, h, w, q = x.shape
    f1, f2, kq, p = k.shape
    if kq != q:
        raise ShapeError(f"conv2d: input has {q} channels, kernel expects {kq}")
    if f1 > h or f2 > w:
        raise ShapeError(f"conv2d: kernel {f1}x{f2} larger than input {h}x{w}")
    if x.dtype != k.dtype:
        raise ShapeError(f"conv2d: dtype mismatch {x.dtype} vs {k.dtype}")
    xd, kd = _contig(x.data), _contig(k.data)
    out = kernels.conv2d(xd, kd) if batch_invariant else kernels.conv2d_batched(xd, kd)

    def grad(g):
        g = _contig(g)
        gx = gk = None
        if x.requires_grad:
            padded = np.pad(g, ((0, 0), (f1 - 1, f1 - 1), (f2 - 1, f2 - 1), (0, 0)))
            flipped = _contig(kd[::-1, ::-1].transpose(0, 1, 3, 2))
            gx = kernels.conv2d_batched(padded, flipped)
        if k.requires_grad:
            gk = kernels.conv2d_grad_kernel(xd, g, f1, f2)
        return gx, gk

    y = make_node(out, "conv2d", (x, k), grad)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (p,):
            raise ShapeError(f"conv2d: bias must have shape ({p},), got {bias.shape}")
        y = add(y, bias)
    return reshape(y, y.shape[1:]) if single else y


def conv2d_diag(x, k) -> Tensor:
    """Independent filtering of each channel (one filter per group).

    ``k`` is ``(F,F,R)`` shared by the batch, or ``(N,F,F,R)`` with one filter
    bank per sample.
    """
    x, k = as_tensor(x), as_tensor(k)
    x, single = _batched(x, "conv2d_diag")
    n, h, w, r = x.shape
    shared = k.ndim == 3
    if k.ndim not in (3, 4):
        raise ShapeError(f"conv2d_diag: kernel must be (F,F,R) or (N,F,F,R), got {k.shape}")
    if k.shape[-1] != r:
        raise ShapeError(f"conv2d_diag: input has {r} channels, kernel has {k.shape[-1]}")
    if not shared and k.shape[0] != n:
        raise ShapeError(f"conv2d_diag: {k.shape[0]} filter banks for batch of {n}")
    f1, f2 = k.shape[-3], k.shape[-2]
    if f1 > h or f2 > w:
        raise ShapeError(f"conv2d_diag: kernel {f1}x{f2} larger than input {h}x{w}")
    xd = _contig(x.data)
    kd = _contig(np.broadcast_to(k.data, (n, f1, f2, r)))
    out = kernels.dconv(xd, kd)

    def grad(g):
        g = _contig(g)
        gx = gk = None
        if x.requires_grad:
            padded = np.pad(g, ((0, 0), (f1 - 1, f1 - 1), (f2 - 1, f2 - 1), (0, 0)))
            gx = kernels.dconv(padded, _contig(kd[:, ::-1, ::-1]))
        if k.requires_grad:
            gk = kernels.dconv(xd, g)
            if shared:
                gk = gk.sum(axis=0)
        return gx, gk

    y = make_node(out, "conv2d_diag", (x, k), grad)
    return reshape(y, y.shape[1:]) if single else y


def xcorr(x, k) -> Tensor:
    """Per-sample full-depth cross-correlation: ``(N,H,W,C) x (N,F1,F2,C) -> (N,H',W')``."""
    x, k = as_tensor(x), as_tensor(k)
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"xcorr expects batched (N,H,W,C) operands, got {x.shape}, {k.shape}")
    if k.shape[1] > x.shape[1] or k.shape[2] > x.shape[2]:
        raise ShapeError(f"xcorr: template {k.shape[1:3]} larger than search {x.shape[1:3]}")
    return sum(conv2d_diag(x, k), axis=-1)


def maxpool2(x) -> Tensor:
    """2x2 max pooling with stride 2; a trailing odd row/column is dropped."""
    x = as_tensor(x)
    x, single = _batched(x, "maxpool2")
    n, h, w, c = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2: input {h}x{w} smaller than the 2x2 window")
    out, idx = kernels.maxpool2(_contig(x.data))
    y = make_node(out, "maxpool2", (x,), lambda g: (kernels.maxpool2_grad(_contig(g), idx, h, w),))
    return reshape(y, y.shape[1:]) if single else y


# ---------------------------------------------------------------- normalization

BN_EPS = 1e-5
BN_DECAY = 0.9


def batchnorm(x, gamma, beta, training: bool, running_mean=None, running_var=None,
              eps: float = BN_EPS):
    """Per-channel batch normalization over every axis but the last.

    Returns ``(y, (batch_mean, batch_var))``; the statistics are ``None`` in
    evaluation mode, where the running estimates are used instead.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta must have shape ({c},)")
    axes = tuple(range(x.ndim - 1))
    if not training:
        scale = (1.0 / np.sqrt(np.asarray(running_var) + eps)).astype(x.dtype)
        shift = np.asarray(running_mean, dtype=x.dtype)
        xhat = (x - Tensor(shift, dtype=x.dtype)) * Tensor(scale, dtype=x.dtype)
        return xhat * gamma + beta, None
    if x.shape[0] < 2:
        raise ShapeError("batchnorm in training mode needs a batch of at least 2")
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((x.data - mu) * inv).astype(x.dtype)
    m = x.size // c

    def grad(g):
        # standard batchnorm backward through the batch statistics
        gxhat = g
        gx = inv / m * (m * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
        return (gx.astype(x.dtype),)

    normed = make_node(xhat, "batchnorm", (x,), grad)
    return normed * gamma + beta, (mu, var)
