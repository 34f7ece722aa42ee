"""Static and dynamic layers.

A dynamic layer gets some of its parameters per exemplar (``w_pred``,
optionally ``b_pred``) instead of holding them. The factorized layers keep two
learned projections around a diagonal core, so only the diagonal has to be
predicted:

* fully connected: ``y = M' diag(w) M x + b``
* convolutional:  ``y = M' * (w *_d (M * x)) + b`` with 1x1 projections ``M``
  and ``M'`` and a channel-wise convolution ``*_d``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from learnet import ops
from learnet.autodiff import ShapeError, Tensor, as_tensor

LAYER_KINDS = ("conv", "fc", "maxpool", "relu", "batchnorm", "factorized-conv", "factorized-fc")


@dataclass(frozen=True)
class LayerSpec:
    """Declarative layer description; input sizes are inferred by chaining.

    ``r`` is the factorized channel count. When unset it defaults to the
    output channel count for convolutions and to the input size for fully
    connected layers.
    """

    kind: str
    size: int = 0
    out: int = 0
    r: Optional[int] = None
    dynamic: bool = False
    predict_bias: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        if self.kind in ("conv", "factorized-conv") and self.size < 1:
            raise ValueError(f"{self.kind} layer needs a filter size >= 1")
        if self.kind in ("conv", "fc", "factorized-conv", "factorized-fc") and self.out < 1:
            raise ValueError(f"{self.kind} layer needs out >= 1")
        if self.dynamic and self.kind not in ("conv", "fc", "factorized-conv", "factorized-fc"):
            raise ValueError(f"{self.kind} layers cannot be dynamic")

    @property
    def is_conv(self) -> bool:
        return self.kind in ("conv", "factorized-conv")

    def factor_channels(self, in_channels: int) -> int:
        if self.r is not None:
            return self.r
        return self.out if self.is_conv else in_channels


# ------------------------------------------------------------------ static layers

@dataclass
class StaticConvLayer:
    filters: Tensor  # (f, f, d, k)
    bias: Tensor     # (k,)

    def __post_init__(self):
        self.filters, self.bias = as_tensor(self.filters), as_tensor(self.bias)
        if self.filters.ndim != 4 or self.filters.shape[0] < 1:
            raise ShapeError(f"filters must be (f, f, d, k), got {self.filters.shape}")
        if self.bias.shape != (self.filters.shape[3],):
            raise ShapeError("bias length must equal the number of output channels")

    def __call__(self, x) -> Tensor:
        return ops.conv2d(x, self.filters, self.bias)


@dataclass
class FCLayer:
    weight: Tensor  # (k, d)
    bias: Tensor    # (k,)

    def __post_init__(self):
        self.weight, self.bias = as_tensor(self.weight), as_tensor(self.bias)


def fc_forward(layer: FCLayer, x) -> Tensor:
    """``y = W x + b`` for a vector ``x (d,)`` or a batch ``(N, d)``."""
    x = as_tensor(x)
    single = x.ndim == 1
    y = ops.linear(ops.reshape(x, (1, -1)) if single else x, layer.weight, layer.bias)
    return ops.reshape(y, (-1,)) if single else y


# ------------------------------------------------------------------ factorized layers

@dataclass
class FactorizedFCLayer:
    M: Tensor                       # (r, d)
    Mprime: Tensor                  # (k, r)
    bias: Optional[Tensor] = None   # (k,) static bias; None when it is predicted

    def __post_init__(self):
        self.M, self.Mprime = as_tensor(self.M), as_tensor(self.Mprime)
        if self.bias is not None:
            self.bias = as_tensor(self.bias)
        if self.M.shape[0] != self.Mprime.shape[1]:
            raise ShapeError(f"M {self.M.shape} and Mprime {self.Mprime.shape} disagree on r")


def factorized_fc_forward(layer: FactorizedFCLayer, x, w_pred, b_pred=None) -> Tensor:
    """``y = M' diag(w) M x + b``; ``w_pred`` is ``(r,)`` or per-sample ``(N, r)``."""
    x, w_pred = as_tensor(x), as_tensor(w_pred)
    single = x.ndim == 1
    xb = ops.reshape(x, (1, -1)) if single else x
    r = layer.M.shape[0]
    if w_pred.shape[-1] != r:
        raise ShapeError(f"w_pred has {w_pred.shape[-1]} elements, factorized dimension is {r}")
    h = ops.mul(ops.linear(xb, layer.M), w_pred)
    y = ops.linear(h, layer.Mprime)
    y = _add_bias(y, layer.bias, b_pred)
    return ops.reshape(y, (-1,)) if single else y


@dataclass
class FactorizedConvLayer:
    M: Tensor                       # (1, 1, q, r)
    Mprime: Tensor                  # (1, 1, r, p)
    bias: Optional[Tensor] = None   # (p,) static bias; None when it is predicted

    def __post_init__(self):
        self.M, self.Mprime = as_tensor(self.M), as_tensor(self.Mprime)
        if self.bias is not None:
            self.bias = as_tensor(self.bias)
        if self.M.shape[:2] != (1, 1) or self.Mprime.shape[:2] != (1, 1):
            raise ShapeError("M and Mprime must be 1x1 convolutions")
        if self.M.shape[3] != self.Mprime.shape[2]:
            raise ShapeError(f"M maps to {self.M.shape[3]} channels, Mprime expects {self.Mprime.shape[2]}")

    @property
    def q(self) -> int:
        return self.M.shape[2]

    @property
    def r(self) -> int:
        return self.M.shape[3]

    @property
    def p(self) -> int:
        return self.Mprime.shape[3]


def factorized_conv_forward(layer: FactorizedConvLayer, x, w_pred, b_pred=None) -> Tensor:
    """Project to ``r`` channels, filter each channel with its own ``f x f``
    filter from ``w_pred``, project back to ``p`` channels, add the bias.

    ``w_pred`` is ``(f, f, r)`` or per-sample ``(N, f, f, r)``. No
    nonlinearity separates the three stages.
    """
    x, w_pred = as_tensor(x), as_tensor(w_pred)
    if w_pred.shape[-1] != layer.r:
        raise ShapeError(f"w_pred has {w_pred.shape[-1]} channels, layer has r={layer.r}")
    h = ops.conv2d(x, layer.M)
    h = ops.conv2d_diag(h, w_pred)
    y = ops.conv2d(h, layer.Mprime)
    return _add_bias(y, layer.bias, b_pred)


def _add_bias(y: Tensor, static: Optional[Tensor], predicted) -> Tensor:
    if predicted is not None:
        predicted = as_tensor(predicted)
        if predicted.ndim == 2 and y.ndim == 4:  # (N, p) -> broadcast over space
            predicted = ops.reshape(predicted, (predicted.shape[0], 1, 1, predicted.shape[1]))
        return ops.add(y, predicted)
    if static is not None:
        return ops.add(y, static)
    return y


def basis_filter_expand(layer: FactorizedConvLayer, w_pred) -> np.ndarray:
    """Equivalent dense filter bank of a factorized convolution.

    Each dense filter mixes the ``r`` single-channel basis filters:
    ``a[:, :, j, i] = sum_k Mprime[k, i] * M[j, k] * w[:, :, k]``. Returns
    ``(f, f, q, p)``, or ``(N, f, f, q, p)`` for per-sample ``w_pred``.
    """
    m = np.asarray(layer.M.data)[0, 0]         # (q, r)
    mp = np.asarray(layer.Mprime.data)[0, 0]   # (r, p)
    w = np.asarray(w_pred.data if isinstance(w_pred, Tensor) else w_pred)
    return np.einsum("jk,ki,...abk->...abji", m, mp, w)


# ------------------------------------------------------------------ parameter counts

def count_predicted(spec: LayerSpec, in_channels: int) -> int:
    """Elements a learnet must output for this layer under factorization."""
    r = spec.factor_channels(in_channels)
    n = spec.size * spec.size * r if spec.is_conv else r
    if spec.predict_bias:
        n += spec.out
    return n


def count_naive(spec: LayerSpec, in_channels: int) -> int:
    """Elements a learnet would output predicting the full weight tensor."""
    n = spec.size * spec.size * in_channels * spec.out if spec.is_conv else in_channels * spec.out
    if spec.predict_bias:
        n += spec.out
    return n


def linear_learnet_size(n_outputs: int, exemplar_dim: int) -> int:
    """Weights of a linear learnet ``w(z) = W' z`` with ``n_outputs`` outputs."""
    return n_outputs * exemplar_dim
