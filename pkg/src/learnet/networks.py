"""Streams, learnets and comparison functions assembled into architectures.

Five architectures share one declarative :class:`NetworkSpec`:

``shared``
    two streams with the same parameters, compared by the comparison function
``unshared``
    two streams with disjoint parameters
``factorized``
    shared streams whose dynamic-designated layer is a factorized convolution
    with a learned (static) diagonal
``siamese-learnet``
    the learnet maps the exemplar to the diagonal of the factorized layer; both
    streams use the predicted filters
``single-stream-learnet``
    only the candidate goes through the stream; the learnet predicts the
    dynamic filters and the comparison layer's parameters

Scores follow "higher means more similar": distances are negated, divided by
a fixed function of the embedding size, then a learned scalar gain and offset
are applied.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Mapping, Optional

import numpy as np

from learnet import ops
from learnet.autodiff import ShapeError, Tensor, as_tensor
from learnet.layers import (
    FactorizedConvLayer,
    FactorizedFCLayer,
    LayerSpec,
    count_naive,
    count_predicted,
    factorized_conv_forward,
    factorized_fc_forward,
)

ARCHITECTURES = ("shared", "unshared", "factorized", "siamese-learnet", "single-stream-learnet")
LEARNET_ARCHITECTURES = ("siamese-learnet", "single-stream-learnet")
COMPARISONS = ("dot", "euclidean", "weighted-l1")
PRECISIONS = {"float32": np.float32, "float64": np.float64}

# The prediction head starts at a tenth of the usual Gaussian scale: at full
# scale the predicted filters and comparison parameters are large enough for
# the first updates to collapse every score to a constant.
HEAD_INIT_SCALE = 0.1

BUFFER_SUFFIXES = (".running_mean", ".running_var")
NO_DECAY_SUFFIXES = (".bn_gamma", ".bn_beta")


class SpecError(ValueError):
    """Invalid or inconsistent network description."""


class MissingParameter(KeyError):
    """A parameter slot required by the network spec is absent from the ParamSet."""


# ====================================================================== spec

@dataclass(frozen=True)
class NetworkSpec:
    architecture: str
    comparison: str
    input_shape: tuple
    stream: tuple
    learnet: Optional[tuple] = None
    precision: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "stream", tuple(self.stream))
        if self.learnet is not None:
            object.__setattr__(self, "learnet", tuple(self.learnet))
        if self.architecture not in ARCHITECTURES:
            raise SpecError(f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}")
        if self.comparison not in COMPARISONS:
            raise SpecError(f"unknown comparison {self.comparison!r}; expected one of {COMPARISONS}")
        if self.precision not in PRECISIONS:
            raise SpecError(f"precision must be one of {tuple(PRECISIONS)}")
        if len(self.input_shape) != 3:
            raise SpecError("input_shape must be (height, width, channels)")
        dynamic = [i for i, layer in enumerate(self.stream) if layer.dynamic]
        if len(dynamic) > 1:
            raise SpecError("at most one stream layer can be dynamic")
        if self.architecture in LEARNET_ARCHITECTURES + ("factorized",) and not dynamic:
            raise SpecError(f"architecture {self.architecture!r} needs a dynamic layer")
        if self.learnet is not None and any(layer.dynamic for layer in self.learnet):
            raise SpecError("learnet layers cannot be dynamic")
        plan(self)  # chain-check every shape up front

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def dynamic_index(self) -> Optional[int]:
        for i, layer in enumerate(self.stream):
            if layer.dynamic:
                return i
        return None

    @property
    def has_learnet(self) -> bool:
        return self.architecture in LEARNET_ARCHITECTURES

    def learnet_trunk(self) -> tuple:
        """The learnet's layers before its prediction head.

        Defaults to the stream's layers up to its last weight layer, whose
        role the prediction head takes over.
        """
        if self.learnet is not None:
            return self.learnet
        last = max(i for i, layer in enumerate(self.stream) if layer.kind not in ("relu", "maxpool", "batchnorm"))
        return tuple(replace(layer, dynamic=False) for layer in self.stream[:last])

    # -------------------------------------------------------------- (de)serialization
    def to_dict(self) -> dict:
        dyn = self.dynamic_index
        return {
            "architecture": self.architecture,
            "comparison": self.comparison,
            "input_shape": list(self.input_shape),
            "stream": [_layer_to_dict(layer, i == dyn) for i, layer in enumerate(self.stream)],
            "dynamic_layer": dyn,
            "r": None if dyn is None else self.stream[dyn].r,
            "predict_bias": False if dyn is None else self.stream[dyn].predict_bias,
            "learnet": None if self.learnet is None else [_layer_to_dict(layer, False) for layer in self.learnet],
            "precision": self.precision,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "NetworkSpec":
        allowed = {"architecture", "comparison", "input_shape", "stream", "dynamic_layer", "r",
                   "predict_bias", "learnet", "precision"}
        _reject_unknown(data, allowed, "network")
        for key in ("architecture", "comparison", "input_shape", "stream"):
            if key not in data:
                raise SpecError(f"network: missing required key {key!r}")
        stream = [_layer_from_dict(d, f"network.stream[{i}]") for i, d in enumerate(data["stream"])]
        dyn = data.get("dynamic_layer")
        if dyn is not None:
            if not isinstance(dyn, int) or not 0 <= dyn < len(stream):
                raise SpecError(f"network.dynamic_layer {dyn!r} is not a stream layer index")
            if stream[dyn].kind not in ("conv", "fc", "factorized-conv", "factorized-fc"):
                raise SpecError(f"network.dynamic_layer {dyn} points at a {stream[dyn].kind} layer")
            stream[dyn] = replace(stream[dyn], dynamic=True, r=data.get("r"),
                                  predict_bias=bool(data.get("predict_bias", False)))
        elif data.get("r") is not None or data.get("predict_bias"):
            raise SpecError("network.r / predict_bias given without a dynamic_layer")
        learnet = data.get("learnet")
        if learnet is not None:
            learnet = tuple(_layer_from_dict(d, f"network.learnet[{i}]") for i, d in enumerate(learnet))
        try:
            return cls(
                architecture=data["architecture"],
                comparison=data["comparison"],
                input_shape=tuple(data["input_shape"]),
                stream=tuple(stream),
                learnet=learnet,
                precision=data.get("precision", "float32"),
            )
        except (ShapeError, ValueError) as exc:
            if isinstance(exc, SpecError):
                raise
            raise SpecError(str(exc)) from None


_LAYER_KEYS = {
    "conv": {"size", "out"},
    "fc": {"out"},
    "factorized-conv": {"size", "out", "r"},
    "factorized-fc": {"out", "r"},
    "relu": set(),
    "maxpool": set(),
    "batchnorm": set(),
}


def _reject_unknown(data: Mapping, allowed: set, where: str):
    if not isinstance(data, Mapping):
        raise SpecError(f"{where}: expected an object")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise SpecError(f"{where}: unknown key(s) {unknown}")


def _layer_from_dict(d: Mapping, where: str) -> LayerSpec:
    kind = d.get("kind") if isinstance(d, Mapping) else None
    if kind not in _LAYER_KEYS:
        raise SpecError(f"{where}: unknown layer kind {kind!r}")
    _reject_unknown(d, _LAYER_KEYS[kind] | {"kind"}, where)
    try:
        return LayerSpec(kind=kind, size=int(d.get("size", 0)), out=int(d.get("out", 0)), r=d.get("r"))
    except ValueError as exc:
        raise SpecError(f"{where}: {exc}") from None


def _layer_to_dict(layer: LayerSpec, is_dynamic: bool) -> dict:
    out = {"kind": layer.kind}
    for key in sorted(_LAYER_KEYS[layer.kind]):
        if key == "r":
            if layer.r is not None and not is_dynamic:
                out["r"] = layer.r
            continue
        out[key] = getattr(layer, key)
    return out


# ====================================================================== plan

@dataclass(frozen=True)
class ParamInfo:
    shape: tuple
    init: str            # "xavier", "zeros", "ones" or "const"
    fan_in: int = 0
    value: float = 0.0
    scale: float = 1.0   # multiplies the Gaussian standard deviation


@dataclass(frozen=True)
class Step:
    """One resolved layer: what to run, on which parameter names."""

    mode: str            # conv, fc, relu, maxpool, bn, fconv, ffc
    prefix: str
    spec: LayerSpec
    in_shape: tuple
    out_shape: tuple
    predicted: bool = False


@dataclass(frozen=True)
class Plan:
    streams: dict                 # prefix -> tuple of Steps
    learnet: tuple                # Steps of the learnet trunk (may be empty)
    head_size: int
    head_in: int
    embedding_shape: tuple
    dynamic_size: int             # elements of the predicted diagonal
    gamma_size: int               # predicted comparison parameters (single-stream)
    params: dict = field(default_factory=dict)   # name -> ParamInfo, in creation order

    @property
    def embedding_size(self) -> int:
        return int(np.prod(self.embedding_shape))


def _chain(layers, input_shape, prefix, dynamic_mode, params) -> tuple:
    """Resolve shapes and parameter slots of a layer list.

    ``dynamic_mode`` decides how a dynamic layer is realized: ``plain`` (an
    ordinary layer), ``static`` (factorized, learned diagonal) or
    ``predicted`` (factorized, diagonal supplied per exemplar).
    """
    shape = tuple(input_shape)
    steps = []
    for i, layer in enumerate(layers):
        name = f"{prefix}.{i}"
        kind = layer.kind
        factorize = kind.startswith("factorized") or (layer.dynamic and dynamic_mode != "plain")
        predicted = layer.dynamic and dynamic_mode == "predicted"
        where = f"{name} ({kind})"
        if kind in ("conv", "factorized-conv"):
            if len(shape) != 3:
                raise ShapeError(f"{where}: convolution needs a spatial input, got {shape}")
            h, w, q = shape
            f = layer.size
            if f > h or f > w:
                raise ShapeError(f"{where}: filter {f}x{f} larger than input {h}x{w}")
            out = (h - f + 1, w - f + 1, layer.out)
            if factorize:
                r = layer.factor_channels(q)
                params[f"{name}.M"] = ParamInfo((1, 1, q, r), "xavier", q)
                params[f"{name}.Mprime"] = ParamInfo((1, 1, r, layer.out), "xavier", r)
                if not predicted:
                    params[f"{name}.w"] = ParamInfo((f, f, r), "xavier", f * f)
                if not (predicted and layer.predict_bias):
                    params[f"{name}.bias"] = ParamInfo((layer.out,), "zeros")
                mode = "fconv"
            else:
                params[f"{name}.weight"] = ParamInfo((f, f, q, layer.out), "xavier", f * f * q)
                params[f"{name}.bias"] = ParamInfo((layer.out,), "zeros")
                mode = "conv"
        elif kind in ("fc", "factorized-fc"):
            d = int(np.prod(shape))
            out = (layer.out,)
            if factorize:
                r = layer.factor_channels(d)
                params[f"{name}.M"] = ParamInfo((r, d), "xavier", d)
                params[f"{name}.Mprime"] = ParamInfo((layer.out, r), "xavier", r)
                if not predicted:
                    params[f"{name}.w"] = ParamInfo((r,), "ones")
                if not (predicted and layer.predict_bias):
                    params[f"{name}.bias"] = ParamInfo((layer.out,), "zeros")
                mode = "ffc"
            else:
                params[f"{name}.weight"] = ParamInfo((layer.out, d), "xavier", d)
                params[f"{name}.bias"] = ParamInfo((layer.out,), "zeros")
                mode = "fc"
        elif kind == "maxpool":
            if len(shape) != 3 or shape[0] < 2 or shape[1] < 2:
                raise ShapeError(f"{where}: input {shape} smaller than the 2x2 window")
            out = (shape[0] // 2, shape[1] // 2, shape[2])
            mode = "maxpool"
        elif kind == "relu":
            out, mode = shape, "relu"
        else:  # batchnorm
            c = shape[-1]
            params[f"{name}.bn_gamma"] = ParamInfo((c,), "ones")
            params[f"{name}.bn_beta"] = ParamInfo((c,), "zeros")
            params[f"{name}.running_mean"] = ParamInfo((c,), "zeros")
            params[f"{name}.running_var"] = ParamInfo((c,), "ones")
            out, mode = shape, "bn"
        steps.append(Step(mode, name, layer, shape, out, predicted))
        shape = out
    return tuple(steps), shape


@lru_cache(maxsize=64)
def plan(spec: NetworkSpec) -> Plan:
    """Resolve every layer's shapes and parameter names for ``spec``."""
    params: dict = {}
    arch = spec.architecture
    mode = {"shared": "plain", "unshared": "plain", "factorized": "static"}.get(arch, "predicted")
    streams = {}
    steps, emb = _chain(spec.stream, spec.input_shape, "phi", mode, params)
    streams["phi"] = steps
    if arch == "unshared":
        streams["phi_z"], _ = _chain(spec.stream, spec.input_shape, "phi_z", mode, params)

    embedding_size = int(np.prod(emb))
    dynamic_size = gamma_size = head_size = head_in = 0
    trunk = ()
    if spec.has_learnet:
        dyn = spec.dynamic_index
        in_shape = streams["phi"][dyn].in_shape
        in_channels = in_shape[-1] if spec.stream[dyn].is_conv else int(np.prod(in_shape))
        dynamic_size = count_predicted(spec.stream[dyn], in_channels)
        if arch == "single-stream-learnet":
            gamma_size = embedding_size * (2 if spec.comparison == "weighted-l1" else 1)
        head_size = dynamic_size + gamma_size
        trunk, trunk_out = _chain(spec.learnet_trunk(), spec.input_shape, "omega", "plain", params)
        head_in = int(np.prod(trunk_out))
        params["omega.head.weight"] = ParamInfo((head_size, head_in), "xavier", head_in, scale=HEAD_INIT_SCALE)
        params["omega.head.bias"] = ParamInfo((head_size,), "zeros")

    if spec.comparison == "weighted-l1" and arch != "single-stream-learnet":
        params["gamma.w"] = ParamInfo((embedding_size,), "ones")
    params["gamma.gain"] = ParamInfo((), "ones")
    params["gamma.bias"] = ParamInfo((), "zeros")
    return Plan(streams, trunk, head_size, head_in, emb, dynamic_size, gamma_size, params)


def head_size(spec: NetworkSpec) -> int:
    return plan(spec).head_size


def dynamic_layer_counts(spec: NetworkSpec) -> tuple:
    """``(predicted, naive)`` element counts of the dynamic layer."""
    dyn = spec.dynamic_index
    if dyn is None:
        raise SpecError("network has no dynamic layer")
    step = plan(spec).streams["phi"][dyn]
    layer = spec.stream[dyn]
    in_channels = step.in_shape[-1] if layer.is_conv else int(np.prod(step.in_shape))
    return count_predicted(layer, in_channels), count_naive(layer, in_channels)


# ====================================================================== parameters

class ParamSet(dict):
    """Named arrays holding every trainable parameter and batchnorm buffer."""

    @staticmethod
    def is_buffer(name: str) -> bool:
        return name.endswith(BUFFER_SUFFIXES)

    @staticmethod
    def decays(name: str) -> bool:
        return not name.endswith(NO_DECAY_SUFFIXES) and not ParamSet.is_buffer(name)

    def trainable_names(self) -> list:
        return [n for n in self if not self.is_buffer(n)]

    def tensors(self, requires_grad: bool = True) -> dict:
        return {n: Tensor(v, requires_grad=requires_grad and not self.is_buffer(n)) for n, v in self.items()}

    def copy(self) -> "ParamSet":
        return ParamSet({n: np.array(v, copy=True) for n, v in self.items()})

    def bitwise_equal(self, other: Mapping) -> bool:
        if list(self) != list(other):
            return False
        return all(self[n].dtype == other[n].dtype and self[n].shape == other[n].shape
                   and self[n].tobytes() == np.asarray(other[n]).tobytes() for n in self)


def check_params(spec: NetworkSpec, params: Mapping):
    """Raise unless ``params`` resolves every slot of ``spec`` with the right shape."""
    for name, info in plan(spec).params.items():
        if name not in params:
            raise MissingParameter(f"parameter {name!r} is missing")
        shape = tuple(np.shape(params[name].data if isinstance(params[name], Tensor) else params[name]))
        if shape != tuple(info.shape):
            raise ShapeError(f"parameter {name!r} has shape {shape}, expected {info.shape}")


# ====================================================================== forward

class Context:
    """Batchnorm mode for one forward pass.

    In training mode batch statistics are used and recorded in ``stats`` so
    the caller can update the running estimates afterwards.
    """

    def __init__(self, training: bool = False):
        self.training = training
        self.stats: list = []


EVAL = Context(False)


def _param(params: Mapping, name: str, dtype) -> Tensor:
    try:
        value = params[name]
    except KeyError:
        raise MissingParameter(f"parameter {name!r} is missing") from None
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value), dtype=dtype)


def images(x, spec: NetworkSpec) -> Tensor:
    """Coerce an image or batch to a ``(N, H, W, C)`` tensor of the network spec's precision."""
    if isinstance(x, Tensor):
        arr = x.data
    else:
        arr = np.asarray(x)
    c = spec.input_shape[2]
    if arr.ndim == 2 and c == 1:
        arr = arr[None, :, :, None]
    elif arr.ndim == 3:
        arr = arr[None] if arr.shape[-1] == c else arr[..., None]
    if arr.ndim != 4 or arr.shape[-1] != c:
        raise ShapeError(f"cannot interpret array of shape {np.shape(x)} as images with {c} channel(s)")
    if isinstance(x, Tensor) and arr is x.data and arr.dtype == spec.dtype:
        return x
    return Tensor(np.ascontiguousarray(arr, dtype=spec.dtype))


@dataclass
class Prediction:
    """Per-exemplar outputs of the learnet, each with a leading batch axis."""

    w: Tensor
    b: Optional[Tensor] = None
    gamma_w: Optional[Tensor] = None
    template: Optional[Tensor] = None

    def repeat(self, n: int) -> "Prediction":
        """Repeat a single-exemplar prediction for ``n`` candidates (constants)."""
        rep = lambda t: None if t is None else Tensor(np.repeat(t.data, n, axis=0))
        return Prediction(rep(self.w), rep(self.b), rep(self.gamma_w), rep(self.template))


def run_stream(spec: NetworkSpec, params: Mapping, x: Tensor, prefix: str = "phi",
               pred: Optional[Prediction] = None, ctx: Context = EVAL) -> Tensor:
    """Apply stream ``prefix`` to a batch; spatial sizes may exceed ``input_shape``."""
    return _run_steps(plan(spec).streams[prefix], params, x, pred, ctx, spec.dtype)


def _run_steps(steps, params, x: Tensor, pred, ctx: Context, dtype) -> Tensor:
    p = lambda name: _param(params, name, dtype)
    for step in steps:
        n = step.prefix
        if step.mode == "conv":
            x = ops.conv2d(x, p(f"{n}.weight"), p(f"{n}.bias"))
        elif step.mode == "fc":
            x = ops.linear(ops.flatten(x), p(f"{n}.weight"), p(f"{n}.bias"))
        elif step.mode == "relu":
            x = ops.relu(x)
        elif step.mode == "maxpool":
            x = ops.maxpool2(x)
        elif step.mode == "bn":
            x = _batchnorm(x, params, n, ctx, dtype)
        else:
            w, b = (pred.w, pred.b) if step.predicted else (p(f"{n}.w"), None)
            bias = None if (step.predicted and b is not None) else p(f"{n}.bias")
            if step.mode == "fconv":
                layer = FactorizedConvLayer(p(f"{n}.M"), p(f"{n}.Mprime"), bias)
                x = factorized_conv_forward(layer, x, w, b)
            else:
                layer = FactorizedFCLayer(p(f"{n}.M"), p(f"{n}.Mprime"), bias)
                x = factorized_fc_forward(layer, ops.flatten(x), w, b)
    return x


def _batchnorm(x, params, n, ctx: Context, dtype):
    gamma, beta = _param(params, f"{n}.bn_gamma", dtype), _param(params, f"{n}.bn_beta", dtype)
    if ctx.training:
        y, (mu, var) = ops.batchnorm(x, gamma, beta, True)
        ctx.stats.append((n, mu, var))
        return y
    mean = _param(params, f"{n}.running_mean", dtype).data
    var = _param(params, f"{n}.running_var", dtype).data
    y, _ = ops.batchnorm(x, gamma, beta, False, mean, var)
    return y


def predict(spec: NetworkSpec, params: Mapping, z, ctx: Context = EVAL) -> Prediction:
    """Run the learnet on exemplars ``z`` and split its head into parameters."""
    if not spec.has_learnet:
        raise SpecError(f"architecture {spec.architecture!r} has no learnet")
    pl = plan(spec)
    z = images(z, spec)
    h = _run_steps(pl.learnet, params, z, None, ctx, spec.dtype)
    # the head only ever sees exemplars, which are bound one at a time, so the
    # faster batched product cannot break candidate-side batch invariance
    out = ops.linear(ops.flatten(h), _param(params, "omega.head.weight", spec.dtype),
                     _param(params, "omega.head.bias", spec.dtype), batch_invariant=False)
    n = out.shape[0]
    dyn = spec.dynamic_index
    layer, step = spec.stream[dyn], pl.streams["phi"][dyn]
    r = layer.factor_channels(step.in_shape[-1] if layer.is_conv else int(np.prod(step.in_shape)))
    w_len = layer.size * layer.size * r if layer.is_conv else r
    w_shape = (n, layer.size, layer.size, r) if layer.is_conv else (n, r)
    w = ops.reshape(out[:, :w_len], w_shape)
    pos = w_len
    b = None
    if layer.predict_bias:
        b = out[:, pos:pos + layer.out]
        pos += layer.out
    gamma_w = template = None
    if pl.gamma_size:
        e = pl.embedding_size
        if spec.comparison == "weighted-l1":
            gamma_w = out[:, pos:pos + e]
            pos += e
        template = out[:, pos:pos + e]
    return Prediction(w, b, gamma_w, template)


def compare(spec: NetworkSpec, params: Mapping, a: Tensor, b: Tensor, weights=None) -> Tensor:
    """Calibrated similarity of two embedding batches (flattened to vectors)."""
    a, b = ops.flatten(a), ops.flatten(b)
    if spec.comparison == "dot":
        s = ops.sum(ops.mul(a, b), axis=-1)
    elif spec.comparison == "euclidean":
        s = ops.neg(ops.norm(ops.sub(a, b), axis=-1))
    else:
        w = _param(params, "gamma.w", spec.dtype) if weights is None else weights
        s = ops.neg(ops.sum(ops.absolute(ops.sub(ops.mul(w, a), ops.mul(w, b))), axis=-1))
    return _calibrate(spec, params, s)


def score_scale(spec: NetworkSpec) -> float:
    """Fixed normalization keeping raw similarities O(1) whatever the embedding size."""
    e = plan(spec).embedding_size
    return 1.0 / math.sqrt(e) if spec.comparison == "euclidean" else 1.0 / e


def _calibrate(spec, params, s):
    s = ops.mul(s, score_scale(spec))
    gain = _param(params, "gamma.gain", spec.dtype)
    bias = _param(params, "gamma.bias", spec.dtype)
    return ops.add(ops.mul(s, gain), bias)


def _pair_batches(spec, z, x):
    z, x = images(z, spec), images(x, spec)
    if z.shape[0] != x.shape[0]:
        raise ShapeError(f"batch sizes differ: {z.shape[0]} exemplars vs {x.shape[0]} candidates")
    return z, x


def forward_siamese(spec: NetworkSpec, params: Mapping, z, x, ctx: Context = EVAL) -> Tensor:
    """Scores ``Gamma(phi(x), phi(z))`` for the shared, unshared and factorized nets."""
    if spec.architecture not in ("shared", "unshared", "factorized"):
        raise SpecError(f"forward_siamese does not handle {spec.architecture!r}")
    z, x = _pair_batches(spec, z, x)
    ex = run_stream(spec, params, x, "phi", ctx=ctx)
    ez = run_stream(spec, params, z, "phi_z" if spec.architecture == "unshared" else "phi", ctx=ctx)
    return compare(spec, params, ex, ez)


def forward_siamese_learnet(spec: NetworkSpec, params: Mapping, z, x, ctx: Context = EVAL) -> Tensor:
    """Both streams run with the filters the learnet predicts from ``z``."""
    if spec.architecture != "siamese-learnet":
        raise SpecError("forward_siamese_learnet needs a siamese-learnet spec")
    z, x = _pair_batches(spec, z, x)
    pred = predict(spec, params, z, ctx)
    ex = run_stream(spec, params, x, "phi", pred, ctx)
    ez = run_stream(spec, params, z, "phi", pred, ctx)
    return compare(spec, params, ex, ez)


def forward_single_stream(spec: NetworkSpec, params: Mapping, z, x, ctx: Context = EVAL) -> Tensor:
    """``z`` only enters through the learnet, which also supplies the comparison
    layer's template (and weights, for weighted l1)."""
    if spec.architecture != "single-stream-learnet":
        raise SpecError("forward_single_stream needs a single-stream-learnet spec")
    z, x = _pair_batches(spec, z, x)
    pred = predict(spec, params, z, ctx)
    return _single_stream_scores(spec, params, x, pred, ctx)


def _single_stream_scores(spec, params, x, pred: Prediction, ctx):
    ex = run_stream(spec, params, x, "phi", pred, ctx)
    return compare(spec, params, ex, pred.template, weights=pred.gamma_w)


def forward(spec: NetworkSpec, params: Mapping, z, x, ctx: Context = EVAL) -> Tensor:
    """Score each (exemplar, candidate) pair with the network spec's architecture."""
    if spec.architecture == "siamese-learnet":
        return forward_siamese_learnet(spec, params, z, x, ctx)
    if spec.architecture == "single-stream-learnet":
        return forward_single_stream(spec, params, z, x, ctx)
    return forward_siamese(spec, params, z, x, ctx)


def forward_conv_gamma(spec: NetworkSpec, params: Mapping, z, x_large, ctx: Context = EVAL) -> Tensor:
    """Dense score map: the exemplar embedding correlated over the search embedding.

    Returns ``(N, H', W')`` where each spatial size is the embedding size
    difference plus one.
    """
    if spec.comparison != "dot":
        raise SpecError("a convolutional comparison is only defined for the dot product")
    if spec.architecture == "single-stream-learnet":
        raise SpecError("a convolutional comparison needs a two-stream architecture")
    z = images(z, spec)
    x = images(x_large, spec)
    if z.shape[0] != x.shape[0]:
        raise ShapeError("exemplar and search batches differ in size")
    if x.shape[1] < z.shape[1] or x.shape[2] < z.shape[2]:
        raise ShapeError(f"search image {x.shape[1:3]} smaller than exemplar {z.shape[1:3]}")
    pred = predict(spec, params, z, ctx) if spec.has_learnet else None
    ez = run_stream(spec, params, z, "phi_z" if spec.architecture == "unshared" else "phi", pred, ctx)
    ex = run_stream(spec, params, x, "phi", pred, ctx)
    if ex.ndim != 4:
        raise SpecError("a convolutional comparison needs a fully convolutional stream")
    return _calibrate(spec, params, ops.xcorr(ex, ez))


# ====================================================================== binding

class Pupil:
    """The network induced by one exemplar, ready to score many candidates.

    Learnet parameters are predicted once; siamese embeddings of the exemplar
    are computed once.
    """

    def __init__(self, spec: NetworkSpec, params: Mapping, z):
        self.spec, self.params = spec, params
        z = images(z, spec)
        if z.shape[0] != 1:
            raise ShapeError("bind one exemplar at a time")
        self.z = z
        self.pred = predict(spec, params, z) if spec.has_learnet else None
        self.ez = None
        if spec.architecture != "single-stream-learnet":
            prefix = "phi_z" if spec.architecture == "unshared" else "phi"
            self.ez = run_stream(spec, params, z, prefix, self.pred)

    @property
    def filters(self) -> Optional[np.ndarray]:
        return None if self.pred is None else self.pred.w.data[0]

    def scores(self, x) -> np.ndarray:
        x = images(x, self.spec)
        n = x.shape[0]
        pred = None if self.pred is None else self.pred.repeat(n)
        if self.spec.architecture == "single-stream-learnet":
            return _single_stream_scores(self.spec, self.params, x, pred, EVAL).data
        ex = run_stream(self.spec, self.params, x, "phi", pred)
        ez = Tensor(np.repeat(self.ez.data, n, axis=0))
        return compare(self.spec, self.params, ex, ez).data

    def score_map(self, x_large) -> np.ndarray:
        x = images(x_large, self.spec)
        if self.spec.comparison != "dot" or self.ez is None:
            raise SpecError("score maps need a two-stream network with the dot comparison")
        n = x.shape[0]
        pred = None if self.pred is None else self.pred.repeat(n)
        ex = run_stream(self.spec, self.params, x, "phi", pred)
        ez = Tensor(np.repeat(self.ez.data, n, axis=0))
        return _calibrate(self.spec, self.params, ops.xcorr(ex, ez)).data


def bind(spec: NetworkSpec, params: Mapping, z) -> Pupil:
    return Pupil(spec, params, z)


# ====================================================================== defaults

def ocr_stream(channels=(16, 64, 512), sizes=(5, 5, 4), dynamic: int = 1, r: Optional[int] = None,
               batchnorm: bool = False) -> tuple:
    """Three valid convolutions with 2x2 pools between them."""
    layers = []
    for i, (f, c) in enumerate(zip(sizes, channels)):
        is_dyn = i == dynamic
        layers.append(LayerSpec("conv", size=f, out=c, dynamic=is_dyn, r=r if is_dyn else None))
        if i < len(channels) - 1:
            if batchnorm:
                layers.append(LayerSpec("batchnorm"))
            layers += [LayerSpec("relu"), LayerSpec("maxpool")]
    return tuple(layers)


def default_ocr_spec(architecture: str = "single-stream-learnet", comparison: str = "weighted-l1",
                     precision: str = "float32") -> NetworkSpec:
    """The character-recognition network: 28x28 input, filters 5x5x1x16,
    5x5x16x64 (dynamic, 64 predicted 5x5 filters) and 4x4x64x512."""
    return NetworkSpec(architecture, comparison, (28, 28, 1), ocr_stream(r=64), precision=precision)


def default_tracking_spec(architecture: str = "siamese-learnet", channels=(16, 32, 32),
                          precision: str = "float32") -> NetworkSpec:
    """Small fully convolutional stream for 32x32 exemplars and 64x64 search crops,
    batch normalization after the hidden linear layers."""
    layers = [
        LayerSpec("conv", size=3, out=channels[0]), LayerSpec("batchnorm"), LayerSpec("relu"), LayerSpec("maxpool"),
        LayerSpec("conv", size=3, out=channels[1], dynamic=True), LayerSpec("batchnorm"), LayerSpec("relu"),
        LayerSpec("maxpool"),
        LayerSpec("conv", size=3, out=channels[2]),
    ]
    return NetworkSpec(architecture, "dot", (32, 32, 1), tuple(layers), precision=precision)


def total_stride(spec: NetworkSpec) -> int:
    return 2 ** sum(1 for layer in spec.stream if layer.kind == "maxpool")


def stream_output_shape(spec: NetworkSpec, height: int, width: int) -> tuple:
    """Embedding shape of the stream for a ``height x width`` input."""
    mode = {"shared": "plain", "unshared": "plain", "factorized": "static"}.get(spec.architecture, "predicted")
    _, shape = _chain(spec.stream, (height, width, spec.input_shape[2]), "phi", mode, {})
    return shape


def score_map_size(spec: NetworkSpec, search_size: int) -> int:
    """Side of the dense score map for square search crops of ``search_size``."""
    ez = plan(spec).embedding_shape
    ex = stream_output_shape(spec, search_size, search_size)
    if len(ex) != 3 or len(ez) != 3:
        raise SpecError("dense scoring needs a fully convolutional stream")
    if ex[0] < ez[0]:
        raise ShapeError(f"search size {search_size} gives an embedding smaller than the exemplar's")
    return ex[0] - ez[0] + 1
