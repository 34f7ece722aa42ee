# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels. Same contracts as ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy
cimport scipy.linalg.cython_blas as blas

ctypedef fused real:
    float
    double

NAME = "cython"


cdef void _im2col(const real[:, :, ::1] x, Py_ssize_t f1, Py_ssize_t f2, real *cols) noexcept nogil:
    # row (i, j) holds the window at (i, j) flattened in (a, b, c) order
    cdef Py_ssize_t h = x.shape[0], w = x.shape[1], q = x.shape[2]
    cdef Py_ssize_t ho = h - f1 + 1, wo = w - f2 + 1
    cdef Py_ssize_t i, j, a, span = f2 * q, kdim = f1 * f2 * q
    for i in range(ho):
        for j in range(wo):
            for a in range(f1):
                memcpy(&cols[(i * wo + j) * kdim + a * span], &x[i + a, j, 0], span * sizeof(real))


cdef void _gemm(char *ta, char *tb, int m, int n, int kk, real alpha, real *a, int lda,
                real *b, int ldb, real beta, real *c, int ldc) noexcept nogil:
    if real is float:
        blas.sgemm(ta, tb, &m, &n, &kk, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)
    else:
        blas.dgemm(ta, tb, &m, &n, &kk, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


def conv2d(const real[:, :, :, ::1] x, const real[:, :, :, ::1] k):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], q = x.shape[3]
    cdef Py_ssize_t f1 = k.shape[0], f2 = k.shape[1], p = k.shape[3]
    cdef Py_ssize_t ho = h - f1 + 1, wo = w - f2 + 1
    cdef Py_ssize_t s, m = ho * wo, kdim = f1 * f2 * q
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, ho, wo, p), dtype=dtype)
    cols_arr = np.empty((m, kdim), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef real[:, ::1] cols = cols_arr
    cdef real *cptr = &cols[0, 0]
    with nogil:
        for s in range(n):
            _im2col(x[s], f1, f2, cptr)
            # row-major out (m x p) = cols (m x kdim) @ k (kdim x p)
            _gemm("N", "N", <int>p, <int>m, <int>kdim, 1, <real *>&k[0, 0, 0, 0], <int>p,
                  cptr, <int>kdim, 0, &out[s, 0, 0, 0], <int>p)
    return out_arr


cdef Py_ssize_t _chunk(Py_ssize_t n, Py_ssize_t rows_per_sample, Py_ssize_t kdim):
    # samples per im2col buffer, keeping it around 8M elements
    cdef Py_ssize_t per = rows_per_sample * kdim
    if per <= 0:
        return n
    return max(1, min(n, <Py_ssize_t>(8_000_000 // per)))


def conv2d_batched(const real[:, :, :, ::1] x, const real[:, :, :, ::1] k):
    """Same result as ``conv2d`` up to rounding, with one matrix product per
    chunk of samples. Rows may round differently depending on the batch."""
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], q = x.shape[3]
    cdef Py_ssize_t f1 = k.shape[0], f2 = k.shape[1], p = k.shape[3]
    cdef Py_ssize_t ho = h - f1 + 1, wo = w - f2 + 1
    cdef Py_ssize_t s, s0, cnt, m = ho * wo, kdim = f1 * f2 * q
    cdef Py_ssize_t chunk = _chunk(n, m, kdim)
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, ho, wo, p), dtype=dtype)
    cols_arr = np.empty((chunk * m, kdim), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef real[:, ::1] cols = cols_arr
    cdef real *cptr = &cols[0, 0]
    with nogil:
        s0 = 0
        while s0 < n:
            cnt = min(chunk, n - s0)
            for s in range(cnt):
                _im2col(x[s0 + s], f1, f2, cptr + s * m * kdim)
            _gemm("N", "N", <int>p, <int>(cnt * m), <int>kdim, 1, <real *>&k[0, 0, 0, 0], <int>p,
                  cptr, <int>kdim, 0, &out[s0, 0, 0, 0], <int>p)
            s0 += cnt
    return out_arr


def conv2d_grad_kernel(const real[:, :, :, ::1] x, const real[:, :, :, ::1] gy, Py_ssize_t f1, Py_ssize_t f2):
    cdef Py_ssize_t n = x.shape[0], q = x.shape[3]
    cdef Py_ssize_t ho = gy.shape[1], wo = gy.shape[2], p = gy.shape[3]
    cdef Py_ssize_t s, s0, cnt, m = ho * wo, kdim = f1 * f2 * q
    cdef Py_ssize_t chunk = _chunk(n, m, kdim)
    dtype = np.float32 if real is float else np.float64
    gk_arr = np.zeros((f1, f2, q, p), dtype=dtype)
    cols_arr = np.empty((chunk * m, kdim), dtype=dtype)
    cdef real[:, :, :, ::1] gk = gk_arr
    cdef real[:, ::1] cols = cols_arr
    cdef real *cptr = &cols[0, 0]
    with nogil:
        s0 = 0
        while s0 < n:
            cnt = min(chunk, n - s0)
            for s in range(cnt):
                _im2col(x[s0 + s], f1, f2, cptr + s * m * kdim)
            # gk (kdim x p) += cols.T @ gy[s0:s0+cnt]
            _gemm("N", "T", <int>p, <int>kdim, <int>(cnt * m), 1, <real *>&gy[s0, 0, 0, 0], <int>p,
                  cptr, <int>kdim, 1, &gk[0, 0, 0, 0], <int>p)
            s0 += cnt
    return gk_arr


def dconv(const real[:, :, :, ::1] x, const real[:, :, :, ::1] k):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], r = x.shape[3]
    cdef Py_ssize_t f1 = k.shape[1], f2 = k.shape[2]
    cdef Py_ssize_t ho = h - f1 + 1, wo = w - f2 + 1
    cdef Py_ssize_t s, i, j, a, b, c
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, ho, wo, r), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef real *orow
    cdef const real *xrow
    cdef const real *krow
    with nogil:
        for s in range(n):
            for i in range(ho):
                for j in range(wo):
                    orow = &out[s, i, j, 0]
                    for a in range(f1):
                        for b in range(f2):
                            xrow = &x[s, i + a, j + b, 0]
                            krow = &k[s, a, b, 0]
                            for c in range(r):
                                orow[c] += xrow[c] * krow[c]
    return out_arr


def maxpool2(const real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], ch = x.shape[3]
    cdef Py_ssize_t ho = h // 2, wo = w // 2
    cdef Py_ssize_t s, i, j, c, t
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, ho, wo, ch), dtype=dtype)
    idx_arr = np.empty((n, ho, wo, ch), dtype=np.int8)
    cdef real[:, :, :, ::1] y = y_arr
    cdef cnp.int8_t[:, :, :, ::1] idx = idx_arr
    cdef real best, v
    cdef cnp.int8_t arg
    with nogil:
        for s in range(n):
            for i in range(ho):
                for j in range(wo):
                    for c in range(ch):
                        best = x[s, 2 * i, 2 * j, c]
                        arg = 0
                        for t in range(1, 4):
                            v = x[s, 2 * i + t // 2, 2 * j + t % 2, c]
                            if v > best:
                                best = v
                                arg = <cnp.int8_t>t
                        y[s, i, j, c] = best
                        idx[s, i, j, c] = arg
    return y_arr, idx_arr


def maxpool2_grad(const real[:, :, :, ::1] gy, const cnp.int8_t[:, :, :, ::1] idx, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = gy.shape[0], ho = gy.shape[1], wo = gy.shape[2], ch = gy.shape[3]
    cdef Py_ssize_t s, i, j, c, t
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.zeros((n, h, w, ch), dtype=dtype)
    cdef real[:, :, :, ::1] gx = gx_arr
    with nogil:
        for s in range(n):
            for i in range(ho):
                for j in range(wo):
                    for c in range(ch):
                        t = idx[s, i, j, c]
                        gx[s, 2 * i + t // 2, 2 * j + t % 2, c] = gy[s, i, j, c]
    return gx_arr
