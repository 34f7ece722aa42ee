import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import tiny_spec
from learnet.autodiff import check_gradient
from learnet.networks import Context, ParamSet, plan
from learnet.training import (
    Triplet,
    TripletBatch,
    TrainConfig,
    TrainingDiverged,
    init_params,
    logistic_loss,
    loss_and_grads,
    lr_schedule,
    objective,
    objective_learnet,
    objective_siamese,
    sgd_step,
    train,
    update_running_stats,
)


class PatternSource:
    """Positives share a bright quadrant with the exemplar; negatives do not."""

    def __init__(self, size=8, noise=0.05):
        self.size, self.noise = size, noise

    def _image(self, rng, quadrant):
        img = rng.random((self.size, self.size, 1)) * self.noise
        h = self.size // 2
        r, c = divmod(quadrant, 2)
        img[r * h:(r + 1) * h, c * h:(c + 1) * h] += 1.0
        return img

    def sample(self, rng, n):
        out = []
        for _ in range(n):
            qa = int(rng.integers(4))
            positive = rng.random() < 0.5
            qb = qa if positive else int((qa + rng.integers(1, 4)) % 4)
            out.append(Triplet(self._image(rng, qa), self._image(rng, qb), 1 if positive else -1))
        return TripletBatch.stack(out)


def test_logistic_loss_values():
    assert logistic_loss(0.0, 1) == pytest.approx(math.log(2))
    assert logistic_loss(1000.0, -1) == pytest.approx(1000.0)
    assert logistic_loss(1000.0, 1) == 0.0


def test_triplet_label_validation():
    with pytest.raises(ValueError):
        Triplet(np.zeros(1), np.zeros(1), 0)


def test_objective_dispatch(rng):
    batch = PatternSource().sample(rng, 4)
    learnet, siamese = tiny_spec("siamese-learnet"), tiny_spec("shared")
    objective_learnet(learnet, init_params(learnet, rng), batch)
    objective_siamese(siamese, init_params(siamese, rng), batch)
    with pytest.raises(ValueError):
        objective_learnet(siamese, init_params(siamese, rng), batch)
    with pytest.raises(ValueError):
        objective_siamese(learnet, init_params(learnet, rng), batch)


def test_loss_and_grads_matches_finite_differences(rng):
    spec = tiny_spec("siamese-learnet", "weighted-l1", batchnorm=True)
    params = init_params(spec, rng)
    batch = PatternSource().sample(rng, 4)
    _, grads, stats = loss_and_grads(spec, params, batch)
    assert sorted({s[0] for s in stats}) == ["omega.1", "phi.1"]
    buffers = {n: params[n] for n in params if ParamSet.is_buffer(n)}
    # a bias directly before batchnorm is cancelled by the normalization, so
    # its gradient is exactly zero and has no meaningful relative error
    cancelled = {"phi.0.bias", "omega.0.bias"}
    for name in cancelled:
        assert np.abs(grads[name]).max() <= 1e-12
    trainable = {n: params[n] for n in params.trainable_names() if n not in cancelled}
    fixed = {**buffers, **{n: params[n] for n in cancelled}}
    f = lambda d: objective(spec, {**d, **fixed}, batch, Context(True))
    assert check_gradient(f, trainable) <= 1e-4
    assert set(grads) == set(params.trainable_names())


def test_sgd_step_applies_decay_except_to_batchnorm():
    params = ParamSet({"phi.0.weight": np.array([1.0]), "phi.1.bn_gamma": np.array([1.0]),
                       "phi.1.running_mean": np.array([5.0])})
    grads = {"phi.0.weight": np.array([0.5]), "phi.1.bn_gamma": np.array([0.5])}
    out = sgd_step(params, grads, lr=0.1, weight_decay=0.2)
    assert out["phi.0.weight"][0] == pytest.approx(1.0 - 0.1 * (0.5 + 0.2))
    assert out["phi.1.bn_gamma"][0] == pytest.approx(1.0 - 0.05)
    assert out["phi.1.running_mean"][0] == 5.0
    with pytest.raises(KeyError):
        sgd_step(params, {}, 0.1, 0.0)


def test_running_stats_update():
    params = ParamSet({"phi.1.running_mean": np.zeros(2), "phi.1.running_var": np.ones(2)})
    out = update_running_stats(params, [("phi.1", np.array([1.0, 2.0]), np.array([3.0, 5.0]))])
    np.testing.assert_allclose(out["phi.1.running_mean"], [0.1, 0.2])
    np.testing.assert_allclose(out["phi.1.running_var"], [1.2, 1.4])


@given(epochs=st.integers(2, 20), lr0=st.floats(1e-4, 1.0), ratio=st.floats(1e-4, 1.0))
def test_lr_schedule_is_geometric(epochs, lr0, ratio):
    cfg = TrainConfig(epochs=epochs, lr_initial=lr0, lr_final=lr0 * ratio)
    rates = [lr_schedule(cfg, e) for e in range(epochs)]
    assert rates[0] == pytest.approx(lr0) and rates[-1] == pytest.approx(lr0 * ratio)
    steps = np.array(rates[1:]) / np.array(rates[:-1])
    np.testing.assert_allclose(steps, steps[0], rtol=1e-9)
    with pytest.raises(ValueError):
        lr_schedule(cfg, epochs)


def test_init_params_statistics():
    spec = tiny_spec("single-stream-learnet", "weighted-l1", batchnorm=True)
    params = init_params(spec, np.random.default_rng(0))
    assert list(params) == list(plan(spec).params)
    assert params["gamma.gain"] == 1.0 and params["gamma.bias"] == 0.0
    assert np.all(params["phi.1.running_var"] == 1) and not params["phi.0.bias"].any()
    big = init_params(tiny_spec("shared"), np.random.default_rng(0), "gaussian", sigma=0.5)
    assert 0.2 < big["phi.0.weight"].std() < 0.8
    with pytest.raises(ValueError):
        init_params(spec, np.random.default_rng(0), "uniform")


def test_improved_xavier_standard_deviation():
    from learnet.layers import LayerSpec
    from learnet.networks import NetworkSpec
    spec = NetworkSpec("shared", "dot", (20, 20, 8), (LayerSpec("conv", size=5, out=400),))
    w = init_params(spec, np.random.default_rng(0))["phi.0.weight"]
    assert w.std() == pytest.approx(math.sqrt(2 / (25 * 8)), rel=0.02)


def test_training_reduces_loss_and_is_deterministic():
    spec = tiny_spec("siamese-learnet", "weighted-l1")
    cfg = TrainConfig(epochs=3, triplets_per_epoch=256, batch_size=16, lr_initial=0.05, lr_final=0.01,
                      weight_decay=0.0, seed=3, val_triplets=64)
    p1, h1 = train(spec, PatternSource(), cfg, PatternSource())
    p2, h2 = train(spec, PatternSource(), cfg, PatternSource())
    assert p1.bitwise_equal(p2) and h1 == h2
    assert h1[-1].val_loss < math.log(2) - 0.05
    assert [r.lr for r in h1] == [lr_schedule(cfg, e) for e in range(3)]


def test_zero_epochs_returns_initialization():
    spec = tiny_spec("shared")
    cfg = TrainConfig(epochs=0, seed=4)
    params, history = train(spec, PatternSource(), cfg)
    assert history == []
    assert params.bitwise_equal(init_params(spec, np.random.default_rng(np.random.SeedSequence(4).spawn(3)[0])))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    spec = tiny_spec("shared", "euclidean")
    cfg = TrainConfig(epochs=1, triplets_per_epoch=64, batch_size=8, lr_initial=1e30, lr_final=1e30)
    with pytest.raises(TrainingDiverged):
        train(spec, PatternSource(), cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_initial=1e-3, lr_final=1e-2)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 1, "momentum": 0.9})
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()
