"""Layer kinds and their forward/backward numerics.

All kernels are pure functions of their arguments (inference-mode batch norm,
zero padding only, NCHW float64). Backward passes take the same inputs the
forward saw and the upstream gradient; they recompute cheap intermediates
instead of carrying hidden caches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import backend
from .errors import ShapeMismatch, UnsupportedKind

CONV2D = "Conv2D"
DWSCONV2D = "DWSConv2D"
FULLY_CONNECTED = "FullyConnected"
BATCH_NORM = "BatchNorm"
RELU = "ReLU"
RELU6 = "ReLU6"
AVG_POOL = "AvgPool"
SOFTMAX = "Softmax"
ADD = "Add"

KINDS = (CONV2D, DWSCONV2D, FULLY_CONNECTED, BATCH_NORM, RELU, RELU6,
         AVG_POOL, SOFTMAX, ADD)

# layers that own a quantizable weight tensor
WEIGHTED = (CONV2D, DWSCONV2D, FULLY_CONNECTED)

RELU6_SATURATION = 6.0

# BatchNorm weight blob rows: [gamma, beta, mean, var] each of length C
BN_GAMMA, BN_BETA, BN_MEAN, BN_VAR = 0, 1, 2, 3


@dataclass
class LayerSpec:
    """One layer of a model graph."""

    id: str
    kind: str
    params: dict = field(default_factory=dict)
    weights: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    inputs: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UnsupportedKind(f"unknown layer kind {self.kind!r}")

    @property
    def stride(self) -> int:
        return int(self.params.get("stride", 1))

    @property
    def pad(self) -> int:
        return int(self.params.get("pad", 0))


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeMismatch(msg)


def _bn_terms(layer: LayerSpec) -> tuple[np.ndarray, np.ndarray]:
    w = layer.weights
    _require(w is not None and w.ndim == 2 and w.shape[0] == 4,
             f"{layer.id}: BatchNorm blob must be [4, C]")
    eps = float(layer.params.get("eps", 1e-5))
    if eps <= 0:
        raise ValueError(f"{layer.id}: eps must be > 0")
    var = w[BN_VAR]
    if np.any(var < 0):
        raise ValueError(f"{layer.id}: negative variance")
    inv = w[BN_GAMMA] / np.sqrt(var + eps)
    shift = w[BN_BETA] - w[BN_MEAN] * inv
    return inv, shift


def pool_window_stride(layer: LayerSpec) -> tuple[int, int]:
    k = int(layer.params.get("window", 2))
    return k, int(layer.params.get("stride", k))


def _pool_geometry(layer: LayerSpec, shape) -> tuple[int, int, int]:
    k, stride = pool_window_stride(layer)
    _require(shape[2] >= k and shape[3] >= k,
             f"{layer.id}: pool window {k} larger than input {shape[2:]}" )
    return k, k, stride


def forward(layer: LayerSpec, xs: list[np.ndarray]) -> np.ndarray:
    """Evaluate one layer on its input tensors."""
    kind = layer.kind
    x = xs[0]

    if kind == CONV2D:
        w = layer.weights
        _require(x.ndim == 4 and w.ndim == 4 and x.shape[1] == w.shape[1],
                 f"{layer.id}: conv input {x.shape} vs weight {w.shape}")
        y = backend.conv2d_fwd(x, w, layer.stride, layer.pad)
        if layer.bias is not None:
            y = y + layer.bias[None, :, None, None]
        return y

    if kind == DWSCONV2D:
        w = layer.weights
        _require(x.ndim == 4 and w.ndim == 4 and w.shape[1] == 1
                 and x.shape[1] == w.shape[0],
                 f"{layer.id}: depthwise input {x.shape} vs weight {w.shape}")
        y = backend.dwconv2d_fwd(x, w, layer.stride, layer.pad)
        if layer.bias is not None:
            y = y + layer.bias[None, :, None, None]
        return y

    if kind == FULLY_CONNECTED:
        w = layer.weights
        x2 = x.reshape(x.shape[0], -1)
        _require(w.ndim == 2 and x2.shape[1] == w.shape[1],
                 f"{layer.id}: fc input {x.shape} vs weight {w.shape}")
        y = x2 @ w.T
        if layer.bias is not None:
            y = y + layer.bias[None, :]
        return y

    if kind == BATCH_NORM:
        inv, shift = _bn_terms(layer)
        _require(x.ndim in (2, 4) and x.shape[1] == inv.shape[0],
                 f"{layer.id}: bn channels {inv.shape[0]} vs input {x.shape}")
        if x.ndim == 4:
            return x * inv[None, :, None, None] + shift[None, :, None, None]
        return x * inv[None, :] + shift[None, :]

    if kind == RELU:
        return np.maximum(x, 0.0)

    if kind == RELU6:
        return np.minimum(np.maximum(x, 0.0), RELU6_SATURATION)

    if kind == AVG_POOL:
        kh, kw, stride = _pool_geometry(layer, x.shape)
        v = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        return v.mean(axis=(4, 5))

    if kind == SOFTMAX:
        _require(x.ndim == 2, f"{layer.id}: softmax expects [N, classes]")
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    if kind == ADD:
        _require(len(xs) == 2 and xs[0].shape == xs[1].shape,
                 f"{layer.id}: add needs two equal-shape inputs")
        return xs[0] + xs[1]

    raise UnsupportedKind(kind)


def backward(
    layer: LayerSpec, xs: list[np.ndarray], gy: np.ndarray
) -> tuple[list[np.ndarray], Optional[np.ndarray], Optional[np.ndarray]]:
    """Gradients of a scalar loss w.r.t. layer inputs, weights and bias."""
    kind = layer.kind
    x = xs[0]
    _require(gy.shape == out_shape(layer, [a.shape for a in xs]),
             f"{layer.id}: grad shape {gy.shape} does not match output")

    if kind == CONV2D:
        gx, gw = backend.conv2d_bwd(x, layer.weights, gy, layer.stride, layer.pad)
        gb = gy.sum(axis=(0, 2, 3)) if layer.bias is not None else None
        return [gx], gw, gb

    if kind == DWSCONV2D:
        gx, gw = backend.dwconv2d_bwd(x, layer.weights, gy, layer.stride, layer.pad)
        gb = gy.sum(axis=(0, 2, 3)) if layer.bias is not None else None
        return [gx], gw, gb

    if kind == FULLY_CONNECTED:
        x2 = x.reshape(x.shape[0], -1)
        gx = (gy @ layer.weights).reshape(x.shape)
        gw = gy.T @ x2
        gb = gy.sum(axis=0) if layer.bias is not None else None
        return [gx], gw, gb

    if kind == BATCH_NORM:
        inv, _ = _bn_terms(layer)
        scale = inv[None, :, None, None] if x.ndim == 4 else inv[None, :]
        return [gy * scale], None, None

    if kind == RELU:
        return [gy * (x > 0.0)], None, None

    if kind == RELU6:
        mask = (x > 0.0) & (x < RELU6_SATURATION)
        return [gy * mask], None, None

    if kind == AVG_POOL:
        kh, kw, stride = _pool_geometry(layer, x.shape)
        gx = np.zeros_like(x)
        g = gy / (kh * kw)
        ho, wo = gy.shape[2], gy.shape[3]
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += g
        return [gx], None, None

    if kind == SOFTMAX:
        y = forward(layer, xs)
        dot = (gy * y).sum(axis=1, keepdims=True)
        return [y * (gy - dot)], None, None

    if kind == ADD:
        return [gy, gy.copy()], None, None

    raise UnsupportedKind(kind)


def out_shape(layer: LayerSpec, in_shapes: list[tuple]) -> tuple:
    """Output shape for given input shapes (validates compatibility)."""
    kind = layer.kind
    s = in_shapes[0]

    if kind in (CONV2D, DWSCONV2D):
        _require(len(s) == 4, f"{layer.id}: expected NCHW input, got {s}")
        kh, kw = layer.weights.shape[2], layer.weights.shape[3]
        oc = layer.weights.shape[0] if kind == CONV2D else s[1]
        ho = (s[2] + 2 * layer.pad - kh) // layer.stride + 1
        wo = (s[3] + 2 * layer.pad - kw) // layer.stride + 1
        _require(ho >= 1 and wo >= 1, f"{layer.id}: kernel larger than input")
        return (s[0], oc, ho, wo)

    if kind == FULLY_CONNECTED:
        return (s[0], layer.weights.shape[0])

    if kind == AVG_POOL:
        kh, kw, stride = _pool_geometry(layer, s)
        return (s[0], s[1], (s[2] - kh) // stride + 1, (s[3] - kw) // stride + 1)

    if kind == ADD:
        _require(len(in_shapes) == 2 and in_shapes[0] == in_shapes[1],
                 f"{layer.id}: add needs two equal-shape inputs")
        return s

    return s
