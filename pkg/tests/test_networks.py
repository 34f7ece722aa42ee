import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import tiny_spec, tiny_stream
from learnet.autodiff import ShapeError, Tensor
from learnet.layers import LayerSpec
from learnet.networks import (
    ARCHITECTURES,
    COMPARISONS,
    MissingParameter,
    NetworkSpec,
    ParamSet,
    SpecError,
    bind,
    check_params,
    compare,
    default_ocr_spec,
    default_tracking_spec,
    dynamic_layer_counts,
    forward,
    forward_conv_gamma,
    head_size,
    plan,
    predict,
    score_map_size,
    score_scale,
    stream_output_shape,
    total_stride,
)
from learnet.training import init_params


def params_for(spec, seed=0):
    return init_params(spec, np.random.default_rng(seed))


def test_default_ocr_spec_shapes():
    spec = default_ocr_spec()
    pl = plan(spec)
    assert pl.embedding_shape == (1, 1, 512)
    assert head_size(spec) == 1600 + 2 * 512
    assert pl.dynamic_size == 1600
    assert dynamic_layer_counts(spec) == (1600, 25_600)
    siamese = default_ocr_spec("siamese-learnet", "dot")
    assert head_size(siamese) == 1600


def test_default_tracking_spec_geometry():
    spec = default_tracking_spec()
    assert total_stride(spec) == 4
    assert plan(spec).embedding_shape == (4, 4, 32)
    assert stream_output_shape(spec, 64, 64) == (12, 12, 32)
    assert score_map_size(spec, 64) == 9


@pytest.mark.parametrize("arch", ARCHITECTURES)
@pytest.mark.parametrize("comparison", COMPARISONS)
def test_every_architecture_scores_pairs(arch, comparison):
    spec = tiny_spec(arch, comparison, batchnorm=True)
    params = params_for(spec)
    rng = np.random.default_rng(0)
    z, x = rng.random((3, 8, 8, 1)), rng.random((3, 8, 8, 1))
    s = forward(spec, params, z, x)
    assert s.shape == (3,) and s.dtype == np.float64 and s.is_finite()


def test_parameter_names_by_architecture():
    names = lambda arch, cmp="dot": set(plan(tiny_spec(arch, cmp)).params)
    assert any(n.startswith("phi_z.") for n in names("unshared"))
    assert "phi.3.w" in names("factorized")
    learnet = names("siamese-learnet")
    assert "phi.3.w" not in learnet and {"phi.3.M", "phi.3.Mprime", "omega.head.weight"} <= learnet
    assert "gamma.w" in names("shared", "weighted-l1")
    assert "gamma.w" not in names("single-stream-learnet", "weighted-l1")
    assert {"gamma.gain", "gamma.bias"} <= names("shared")


def test_single_stream_head_predicts_comparison():
    spec = tiny_spec("single-stream-learnet", "weighted-l1")
    pred = predict(spec, params_for(spec), np.zeros((2, 8, 8, 1)))
    e = plan(spec).embedding_size
    assert pred.w.shape == (2, 2, 2, 3)
    assert pred.template.shape == (2, e) and pred.gamma_w.shape == (2, e)
    dot = tiny_spec("single-stream-learnet", "dot")
    assert predict(dot, params_for(dot), np.zeros((1, 8, 8, 1))).gamma_w is None


def test_comparison_values():
    spec = tiny_spec("shared", "euclidean")
    params = params_for(spec)
    e = plan(spec).embedding_size
    a = Tensor(np.zeros((1, e)))
    b = Tensor(np.full((1, e), 2.0))
    np.testing.assert_allclose(compare(spec, params, a, b).data, [-2.0 * np.sqrt(e) * score_scale(spec)])
    spec = tiny_spec("shared", "weighted-l1")
    params = ParamSet(params_for(spec))
    params["gamma.w"] = np.full(e, 0.5)
    params["gamma.gain"] = np.array(3.0)
    params["gamma.bias"] = np.array(1.0)
    np.testing.assert_allclose(compare(spec, params, a, b).data, [3.0 * -(e * 1.0) / e + 1.0])


def test_symmetric_architectures_are_symmetric(rng):
    for arch in ("shared", "factorized"):
        spec = tiny_spec(arch, "euclidean")
        params = params_for(spec)
        z, x = rng.random((2, 8, 8, 1)), rng.random((2, 8, 8, 1))
        np.testing.assert_allclose(forward(spec, params, z, x).data, forward(spec, params, x, z).data)


@settings(max_examples=10)
@given(arch=st.sampled_from(ARCHITECTURES), comparison=st.sampled_from(COMPARISONS), seed=st.integers(0, 1000))
def test_binding_once_matches_pairwise_bitwise(arch, comparison, seed):
    spec = tiny_spec(arch, comparison, batchnorm=True)
    params = params_for(spec, seed)
    rng = np.random.default_rng(seed)
    z, xs = rng.random((8, 8, 1)), rng.random((6, 8, 8, 1))
    bound = bind(spec, params, z).scores(xs)
    pairwise = np.array([forward(spec, params, z[None], xs[i:i + 1]).data[0] for i in range(6)])
    assert bound.tobytes() == pairwise.tobytes()


def test_candidate_scores_do_not_depend_on_batch(rng):
    spec = tiny_spec("single-stream-learnet", "weighted-l1", precision="float32", batchnorm=True)
    pupil = bind(spec, params_for(spec), rng.random((8, 8, 1)))
    xs = rng.random((7, 8, 8, 1))
    full = pupil.scores(xs)
    assert all(pupil.scores(xs[i:i + 1])[0] == full[i] for i in range(7))


def test_score_map_centre_matches_pair_score(rng):
    spec = default_tracking_spec(channels=(4, 4, 4), precision="float64")
    params = params_for(spec)
    z = rng.random((1, 32, 32, 1))
    x = np.pad(rng.random((1, 32, 32, 1)), ((0, 0), (16, 16), (16, 16), (0, 0)))
    smap = forward_conv_gamma(spec, params, z, x).data
    assert smap.shape == (1, 9, 9)
    inner = x[:, 16:48, 16:48]
    np.testing.assert_allclose(smap[0, 4, 4], forward(spec, params, z, inner).data[0], atol=1e-10)
    np.testing.assert_allclose(bind(spec, params, z[0]).score_map(x), smap)


def test_spec_round_trip_is_canonical():
    for spec in (default_ocr_spec(), default_tracking_spec(), tiny_spec("unshared", "weighted-l1")):
        d = spec.to_dict()
        again = NetworkSpec.from_dict(json.loads(json.dumps(d)))
        assert again == spec and again.to_dict() == d


def test_spec_validation():
    with pytest.raises(SpecError):
        NetworkSpec("nope", "dot", (8, 8, 1), tiny_stream())
    with pytest.raises(SpecError):
        NetworkSpec("shared", "cosine", (8, 8, 1), tiny_stream())
    with pytest.raises(SpecError):
        NetworkSpec("siamese-learnet", "dot", (8, 8, 1), tiny_stream(dynamic=False))
    with pytest.raises(ShapeError):
        NetworkSpec("shared", "dot", (4, 4, 1), tiny_stream(dynamic=False))
    two_dynamic = (LayerSpec("conv", size=2, out=2, dynamic=True), LayerSpec("conv", size=2, out=2, dynamic=True))
    with pytest.raises(SpecError):
        NetworkSpec("siamese-learnet", "dot", (8, 8, 1), two_dynamic)
    d = default_ocr_spec().to_dict()
    with pytest.raises(SpecError, match="unknown"):
        NetworkSpec.from_dict({**d, "extra": 1})
    with pytest.raises(SpecError):
        NetworkSpec.from_dict({**d, "dynamic_layer": 1})   # points at a relu
    with pytest.raises(SpecError):
        NetworkSpec.from_dict({k: v for k, v in d.items() if k != "stream"})


def test_forward_errors(rng):
    spec = tiny_spec("shared")
    params = params_for(spec)
    with pytest.raises(ShapeError):
        forward(spec, params, rng.random((2, 8, 8, 1)), rng.random((3, 8, 8, 1)))
    missing = ParamSet(params)
    del missing["phi.0.weight"]
    with pytest.raises(MissingParameter):
        forward(spec, missing, rng.random((1, 8, 8, 1)), rng.random((1, 8, 8, 1)))
    with pytest.raises(MissingParameter):
        check_params(spec, missing)
    bad = ParamSet(params)
    bad["phi.0.weight"] = np.zeros((2, 2, 1, 3))
    with pytest.raises(ShapeError):
        check_params(spec, bad)
    with pytest.raises(SpecError):
        predict(spec, params, rng.random((1, 8, 8, 1)))
    with pytest.raises(SpecError):
        forward_conv_gamma(tiny_spec("shared", "euclidean"), params_for(tiny_spec("shared", "euclidean")),
                           rng.random((1, 8, 8, 1)), rng.random((1, 12, 12, 1)))


def test_paramset_helpers():
    spec = tiny_spec("factorized", batchnorm=True)
    params = params_for(spec)
    assert ParamSet.is_buffer("phi.1.running_mean") and not ParamSet.decays("phi.1.bn_gamma")
    assert ParamSet.decays("phi.0.weight")
    assert "phi.1.running_var" not in params.trainable_names()
    copy = params.copy()
    assert copy.bitwise_equal(params)
    copy["phi.0.bias"] = copy["phi.0.bias"] + 1
    assert not copy.bitwise_equal(params)
