"""Triplet objectives, initialization and the SGD loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable, Mapping, Optional, Protocol

import numpy as np

from learnet import ops
from learnet.autodiff import ShapeError, Tensor, backward
from learnet.networks import (
    Context,
    EVAL,
    NetworkSpec,
    ParamSet,
    forward,
    forward_conv_gamma,
    plan,
)
from learnet.ops import BN_DECAY


class TrainingDiverged(RuntimeError):
    """The loss became NaN or infinite."""


# ====================================================================== data types

@dataclass(frozen=True)
class Triplet:
    z: np.ndarray
    x: np.ndarray
    label: int

    def __post_init__(self):
        if self.label not in (1, -1):
            raise ValueError("label must be +1 or -1")


@dataclass(frozen=True)
class TripletBatch:
    """Stacked triplets. ``labels`` is ``(N,)`` for scalar scores or
    ``(N, H, W)`` label maps for convolutional scoring."""

    z: np.ndarray
    x: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    @classmethod
    def stack(cls, triplets, label_maps=None) -> "TripletBatch":
        z = np.stack([t.z for t in triplets])
        x = np.stack([t.x for t in triplets])
        labels = np.array([t.label for t in triplets], dtype=np.float64)
        if label_maps is not None:
            labels = np.stack(label_maps).astype(np.float64)
        return cls(z, x, labels)

    def slice(self, start: int, stop: int) -> "TripletBatch":
        return TripletBatch(self.z[start:stop], self.x[start:stop], self.labels[start:stop])


class TripletSource(Protocol):
    def sample(self, rng: np.random.Generator, n: int) -> TripletBatch: ...


INIT_SCHEMES = ("improved-xavier", "gaussian")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    triplets_per_epoch: int = 20000
    batch_size: int = 32
    lr_initial: float = 1e-2
    lr_final: float = 1e-5
    weight_decay: float = 0.005
    positive_fraction: float = 0.5
    seed: int = 0
    init: str = "improved-xavier"
    init_sigma: float = 0.01
    val_triplets: int = 1000

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.triplets_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("triplets_per_epoch and batch_size must be >= 1")
        if not 0 < self.lr_final <= self.lr_initial:
            raise ValueError("need 0 < lr_final <= lr_initial")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 <= self.positive_fraction <= 1:
            raise ValueError("positive_fraction must lie in [0, 1]")
        if self.init not in INIT_SCHEMES:
            raise ValueError(f"init must be one of {INIT_SCHEMES}")
        if self.init_sigma <= 0:
            raise ValueError("init_sigma must be positive")
        if self.val_triplets < 0:
            raise ValueError("val_triplets must be >= 0")

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"train: unknown key(s) {unknown}")
        return cls(**data)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ====================================================================== objectives

def logistic_loss(score, label):
    """``log(1 + exp(-label * score))``, overflow-free. Accepts floats or Tensors."""
    if isinstance(score, Tensor):
        return ops.logistic_loss(score, label)
    return float(np.logaddexp(0.0, -float(label) * float(score)))


def scores_for(spec: NetworkSpec, params, batch: TripletBatch, ctx: Context = EVAL) -> Tensor:
    if batch.labels.ndim == 3:
        return forward_conv_gamma(spec, params, batch.z, batch.x, ctx)
    return forward(spec, params, batch.z, batch.x, ctx)


def _mean_loss(spec, params, batch, ctx):
    scores = scores_for(spec, params, batch, ctx)
    if scores.shape != batch.labels.shape:
        raise ShapeError(f"scores {scores.shape} do not match labels {batch.labels.shape}")
    return ops.mean(ops.logistic_loss(scores, Tensor(batch.labels, dtype=spec.dtype)))


def objective_learnet(spec: NetworkSpec, params, batch: TripletBatch, ctx: Context = EVAL) -> Tensor:
    """Mean logistic loss of a learnet architecture over the batch."""
    if not spec.has_learnet:
        raise ValueError(f"{spec.architecture!r} has no learnet; use objective_siamese")
    return _mean_loss(spec, params, batch, ctx)


def objective_siamese(spec: NetworkSpec, params, batch: TripletBatch, ctx: Context = EVAL) -> Tensor:
    """Mean logistic loss of a static two-stream architecture over the batch."""
    if spec.has_learnet:
        raise ValueError(f"{spec.architecture!r} has a learnet; use objective_learnet")
    return _mean_loss(spec, params, batch, ctx)


def objective(spec, params, batch, ctx: Context = EVAL) -> Tensor:
    return (objective_learnet if spec.has_learnet else objective_siamese)(spec, params, batch, ctx)


def loss_and_grads(spec: NetworkSpec, params: ParamSet, batch: TripletBatch, training: bool = True):
    """Loss value, gradient per trainable name, and the batchnorm statistics seen."""
    leaves = params.tensors(requires_grad=True)
    ctx = Context(training)
    loss = objective(spec, leaves, batch, ctx)
    grads_by_node = backward(loss)
    grads = {}
    for name in params.trainable_names():
        g = grads_by_node.get(leaves[name])
        grads[name] = np.zeros_like(params[name]) if g is None else g
    return loss.item(), grads, ctx.stats


# ====================================================================== optimizer

def sgd_step(params: ParamSet, grads: Mapping, lr: float, weight_decay: float) -> ParamSet:
    """``p <- p - lr * (g + weight_decay * p)``; batchnorm scale/shift are not decayed
    and running statistics are carried over untouched."""
    out = ParamSet()
    for name, p in params.items():
        if ParamSet.is_buffer(name):
            out[name] = p
            continue
        if name not in grads:
            raise KeyError(f"no gradient for trainable parameter {name!r}")
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if weight_decay and ParamSet.decays(name):
            g = g + p.dtype.type(weight_decay) * p
        out[name] = p - p.dtype.type(lr) * g
    return out


def update_running_stats(params: ParamSet, stats, decay: float = BN_DECAY) -> ParamSet:
    """Fold recorded batch statistics into the running estimates, in order."""
    if not stats:
        return params
    out = ParamSet(params)
    for prefix, mu, var in stats:
        m, v = f"{prefix}.running_mean", f"{prefix}.running_var"
        dt = out[m].dtype
        out[m] = (decay * out[m] + (1 - decay) * mu).astype(dt)
        out[v] = (decay * out[v] + (1 - decay) * var).astype(dt)
    return out


def lr_schedule(config: TrainConfig, epoch: int) -> float:
    """Geometric interpolation from ``lr_initial`` (first epoch) to ``lr_final`` (last)."""
    if not 0 <= epoch < max(config.epochs, 1):
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    if config.epochs <= 1:
        return config.lr_initial
    ratio = config.lr_final / config.lr_initial
    return config.lr_initial * ratio ** (epoch / (config.epochs - 1))


# ====================================================================== init

def init_params(spec: NetworkSpec, rng: np.random.Generator, scheme: str = "improved-xavier",
                sigma: float = 0.01) -> ParamSet:
    """Fresh parameters: Gaussian weights with std ``sqrt(2 / fan_in)`` (or a fixed
    ``sigma``), zero biases, unit batchnorm scales and comparison weights.

    The learnet's prediction head is drawn at a reduced scale (see
    ``networks.HEAD_INIT_SCALE``).
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}")
    dtype = spec.dtype
    params = ParamSet()
    for name, info in plan(spec).params.items():
        if info.init == "xavier":
            std = math.sqrt(2.0 / info.fan_in) if scheme == "improved-xavier" else sigma
            value = rng.standard_normal(info.shape) * (std * info.scale)
        elif info.init == "zeros":
            value = np.zeros(info.shape)
        elif info.init == "ones":
            value = np.ones(info.shape)
        else:
            value = np.full(info.shape, info.value)
        params[name] = value.astype(dtype)
    return params


# ====================================================================== loop

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


def evaluate_loss(spec: NetworkSpec, params, batch: TripletBatch, chunk: int = 256) -> float:
    """Mean loss over ``batch`` in evaluation mode."""
    if len(batch) == 0:
        return float("nan")
    total = 0.0
    for start in range(0, len(batch), chunk):
        part = batch.slice(start, start + chunk)
        total += objective(spec, params, part).item() * len(part)
    return total / len(batch)


def train(spec: NetworkSpec, source: TripletSource, config: TrainConfig,
          validation: Optional[TripletSource] = None,
          params: Optional[ParamSet] = None,
          callback: Optional[Callable[[EpochRecord], None]] = None):
    """Run ``epochs`` passes of ``triplets_per_epoch // batch_size`` SGD steps.

    The seed fixes three independent streams: initialization, training
    triplets and the (fixed) validation sample. Returns ``(params, history)``.
    """
    init_ss, train_ss, val_ss = np.random.SeedSequence(config.seed).spawn(3)
    if params is None:
        params = init_params(spec, np.random.default_rng(init_ss), config.init, config.init_sigma)
    rng = np.random.default_rng(train_ss)
    val_batch = None
    if validation is not None and config.val_triplets > 0:
        val_batch = validation.sample(np.random.default_rng(val_ss), config.val_triplets)

    steps = max(1, config.triplets_per_epoch // config.batch_size)
    history = []
    for epoch in range(config.epochs):
        lr = lr_schedule(config, epoch)
        total = 0.0
        for step in range(steps):
            batch = source.sample(rng, config.batch_size)
            loss, grads, stats = loss_and_grads(spec, params, batch)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(
                    f"non-finite loss or gradient at epoch {epoch}, step {step} (lr={lr:g}, loss={loss})")
            params = update_running_stats(sgd_step(params, grads, lr, config.weight_decay), stats)
            total += loss
        val_loss = evaluate_loss(spec, params, val_batch) if val_batch is not None else float("nan")
        record = EpochRecord(epoch, total / steps, val_loss, lr)
        history.append(record)
        if callback is not None:
            callback(record)
    return params, history
