"""Pure numpy convolution kernels.

Every kernel evaluates one sample at a time so that a sample's result does not
depend on which other samples share its batch. The compiled kernels in
``_ckernels`` follow the same rule.

Layout is channel-last throughout: images are ``(N, H, W, C)``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "python"


def _im2col(img, f1, f2):
    # rows are windows, columns in (a, b, c) order like the compiled kernel
    h, w, q = img.shape
    win = sliding_window_view(img, (f1, f2), axis=(0, 1))
    return win.transpose(0, 1, 3, 4, 2).reshape((h - f1 + 1) * (w - f2 + 1), f1 * f2 * q)


def conv2d(x, k):
    """Valid cross-correlation of ``x (N,H,W,Q)`` with ``k (F1,F2,Q,P)``."""
    n, h, w, _ = x.shape
    f1, f2, q, p = k.shape
    ho, wo = h - f1 + 1, w - f2 + 1
    kt = k.reshape(f1 * f2 * q, p)
    out = np.empty((n, ho, wo, p), dtype=x.dtype)
    for i in range(n):
        out[i] = (_im2col(x[i], f1, f2) @ kt).reshape(ho, wo, p)
    return out


def conv2d_batched(x, k):
    """``conv2d`` as one matrix product over the whole batch. Rows may round
    differently depending on the batch, so this is only used for gradients and
    for single-exemplar paths."""
    n, h, w, _ = x.shape
    f1, f2, q, p = k.shape
    ho, wo = h - f1 + 1, w - f2 + 1
    cols = np.concatenate([_im2col(x[i], f1, f2) for i in range(n)])
    return (cols @ k.reshape(f1 * f2 * q, p)).reshape(n, ho, wo, p)


def conv2d_grad_kernel(x, gy, f1, f2):
    """Gradient of ``conv2d`` with respect to the kernel, summed over samples."""
    n, h, w, q = x.shape
    _, ho, wo, p = gy.shape
    cols = np.concatenate([_im2col(x[i], f1, f2) for i in range(n)])
    acc = cols.T @ gy.reshape(n * ho * wo, p)
    return acc.reshape(f1, f2, q, p)


def dconv(x, k):
    """Channel-wise valid cross-correlation with per-sample filters.

    ``x`` is ``(N,H,W,R)`` and ``k`` is ``(N,F1,F2,R)``; output channel ``c`` of
    sample ``n`` only sees input channel ``c`` and filter ``k[n, :, :, c]``.
    """
    n, h, w, r = x.shape
    _, f1, f2, _ = k.shape
    ho, wo = h - f1 + 1, w - f2 + 1
    out = np.empty((n, ho, wo, r), dtype=x.dtype)
    for i in range(n):
        acc = np.zeros((ho, wo, r), dtype=x.dtype)
        for a in range(f1):
            for b in range(f2):
                acc += x[i, a:a + ho, b:b + wo, :] * k[i, a, b, :]
        out[i] = acc
    return out


def maxpool2(x):
    """2x2 stride-2 max pooling. Returns the pooled map and the window argmax."""
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    win = x[:, :2 * ho, :2 * wo, :].reshape(n, ho, 2, wo, 2, c)
    win = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
    idx = win.argmax(axis=-1).astype(np.int8)
    y = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2_grad(gy, idx, h, w):
    n, ho, wo, c = gy.shape
    onehot = np.zeros((n, ho, wo, c, 4), dtype=gy.dtype)
    np.put_along_axis(onehot, idx[..., None].astype(np.intp), gy[..., None], axis=-1)
    blocks = onehot.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    gx = np.zeros((n, h, w, c), dtype=gy.dtype)
    gx[:, :2 * ho, :2 * wo, :] = blocks.reshape(n, 2 * ho, 2 * wo, c)
    return gx
