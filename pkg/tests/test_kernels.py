"""Compiled and numpy kernels against each other and a direct loop."""
import numpy as np
import pytest
from hypothesis import given, strategies as st

from learnet import _pykernels, ops
from learnet._backend import compiled_kernels, kernels
from learnet.autodiff import ShapeError, Tensor, check_gradient

BACKENDS = [_pykernels] + ([compiled_kernels] if compiled_kernels is not None else [])


def loop_conv(x, k):
    n, h, w, q = x.shape
    f1, f2, _, p = k.shape
    out = np.zeros((n, h - f1 + 1, w - f2 + 1, p))
    for s in range(n):
        for i in range(h - f1 + 1):
            for j in range(w - f2 + 1):
                out[s, i, j] = np.tensordot(x[s, i:i + f1, j:j + f2], k, axes=3)
    return out


def loop_dconv(x, k):
    n, h, w, r = x.shape
    f1, f2 = k.shape[1:3]
    out = np.zeros((n, h - f1 + 1, w - f2 + 1, r))
    for i in range(h - f1 + 1):
        for j in range(w - f2 + 1):
            out[:, i, j] = (x[:, i:i + f1, j:j + f2] * k).sum(axis=(1, 2))
    return out


conv_shapes = st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3),
                        st.integers(1, 4), st.integers(1, 4), st.integers(0, 4))


def test_compiled_backend_is_selected_when_built():
    assert compiled_kernels is not None, "extension not built"
    assert kernels is compiled_kernels or kernels is _pykernels


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.NAME)
@given(shape=conv_shapes, seed=st.integers(0, 2**31), dtype=st.sampled_from([np.float32, np.float64]))
def test_conv2d_matches_loop(backend, shape, seed, dtype):
    n, q, p, f1, f2, extra = shape
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, f1 + extra, f2 + extra, q)).astype(dtype)
    k = rng.standard_normal((f1, f2, q, p)).astype(dtype)
    tol = 1e-4 if dtype == np.float32 else 1e-12
    expected = loop_conv(x.astype(np.float64), k.astype(np.float64))
    np.testing.assert_allclose(backend.conv2d(x, k), expected, atol=tol, rtol=tol)
    np.testing.assert_allclose(backend.conv2d_batched(x, k), expected, atol=tol, rtol=tol)


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.NAME)
@given(shape=conv_shapes, seed=st.integers(0, 2**31))
def test_grad_kernel_matches_loop(backend, shape, seed):
    n, q, p, f1, f2, extra = shape
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, f1 + extra, f2 + extra, q))
    gy = rng.standard_normal((n, extra + 1, extra + 1, p))
    expected = np.zeros((f1, f2, q, p))
    for a in range(f1):
        for b in range(f2):
            expected[a, b] = np.einsum("nijq,nijp->qp", x[:, a:a + extra + 1, b:b + extra + 1], gy)
    np.testing.assert_allclose(backend.conv2d_grad_kernel(x, gy, f1, f2), expected, atol=1e-12, rtol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.NAME)
@given(seed=st.integers(0, 2**31), r=st.integers(1, 4), f=st.integers(1, 3), extra=st.integers(0, 3))
def test_dconv_matches_loop(backend, seed, r, f, extra):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, f + extra, f + extra, r))
    k = rng.standard_normal((2, f, f, r))
    np.testing.assert_allclose(backend.dconv(x, k), loop_dconv(x, k), atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.NAME)
def test_maxpool_first_max_wins_and_odd_edge_dropped(backend):
    x = np.zeros((1, 5, 5, 1))
    x[0, 1, 1, 0] = 3.0
    y, idx = backend.maxpool2(x)
    assert y.shape == (1, 2, 2, 1)
    assert y[0, 0, 0, 0] == 3.0 and idx[0, 0, 0, 0] == 3
    assert idx[0, 1, 1, 0] == 0   # all-equal window picks the first element
    g = backend.maxpool2_grad(np.ones_like(y), idx, 5, 5)
    assert g.shape == x.shape and g[0, 1, 1, 0] == 1.0 and g.sum() == 4.0


@pytest.mark.skipif(compiled_kernels is None, reason="extension not built")
@given(seed=st.integers(0, 2**31), dtype=st.sampled_from([np.float32, np.float64]))
def test_backends_agree(seed, dtype):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 7, 6, 2)).astype(dtype)
    k = rng.standard_normal((3, 2, 2, 4)).astype(dtype)
    kd = rng.standard_normal((3, 2, 3, 2)).astype(dtype)
    tol = 1e-5 if dtype == np.float32 else 1e-12
    for name, args in [("conv2d", (x, k)), ("conv2d_batched", (x, k)), ("dconv", (x, kd))]:
        np.testing.assert_allclose(getattr(compiled_kernels, name)(*args), getattr(_pykernels, name)(*args),
                                   atol=tol, rtol=tol)
    yc, ic = compiled_kernels.maxpool2(x)
    yp, ip = _pykernels.maxpool2(x)
    assert np.array_equal(yc, yp) and np.array_equal(ic, ip)


def test_conv2d_is_batch_invariant(rng):
    x = rng.standard_normal((5, 9, 9, 3)).astype(np.float32)
    k = rng.standard_normal((3, 3, 3, 8)).astype(np.float32)
    full = ops.conv2d(Tensor(x), Tensor(k)).data
    for s in range(5):
        assert np.array_equal(ops.conv2d(Tensor(x[s:s + 1]), Tensor(k)).data[0], full[s])


def test_conv_op_gradients(rng):
    x, k, b = rng.standard_normal((2, 6, 6, 3)), rng.standard_normal((3, 3, 3, 4)), rng.standard_normal(4)
    f = lambda d: ops.square(ops.conv2d(d["x"], d["k"], d["b"])).sum()
    assert check_gradient(f, {"x": x, "k": k, "b": b}) <= 1e-6
    kd = rng.standard_normal((2, 3, 3, 3))
    assert check_gradient(lambda d: ops.square(ops.conv2d_diag(d["x"], d["k"])).sum(), {"x": x, "k": kd}) <= 1e-6
    assert check_gradient(lambda d: ops.square(ops.conv2d_diag(d["x"], d["k"])).sum(),
                          {"x": x, "k": kd[0]}) <= 1e-6
    kx = rng.standard_normal((2, 3, 2, 3))
    assert check_gradient(lambda d: ops.square(ops.xcorr(d["x"], d["k"])).sum(), {"x": x, "k": kx}) <= 1e-6


def test_maxpool_and_batchnorm_gradients(rng):
    x = rng.standard_normal((2, 5, 5, 3))
    assert check_gradient(lambda t: ops.square(ops.maxpool2(t)).sum(), x) <= 1e-6
    w = rng.standard_normal((2, 4, 4, 3))
    f = lambda d: (ops.batchnorm(d["x"], d["g"], d["b"], True)[0] * Tensor(w)).sum()
    assert check_gradient(f, {"x": x[:, :4, :4], "g": rng.standard_normal(3), "b": rng.standard_normal(3)}) <= 1e-6


def test_batchnorm_eval_uses_running_stats():
    x = Tensor(np.full((1, 1, 1, 2), 3.0))
    y, stats = ops.batchnorm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), False, np.array([1.0, 3.0]),
                             np.array([4.0, 1.0]))
    assert stats is None
    np.testing.assert_allclose(y.data.ravel(), [2 / np.sqrt(4 + 1e-5), 0.0])


def test_batchnorm_training_needs_two_samples():
    with pytest.raises(ShapeError):
        ops.batchnorm(Tensor(np.ones((1, 2, 2, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)), True)


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.ones((1, 2, 2, 1))), Tensor(np.ones((3, 3, 1, 1))))
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.ones((1, 4, 4, 2))), Tensor(np.ones((3, 3, 1, 1))))
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.ones((1, 4, 4, 1), np.float32)), Tensor(np.ones((3, 3, 1, 1))))
