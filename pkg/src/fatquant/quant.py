"""Quantization math: thresholds, scales, fake quantization, STE gradients.

Conventions shared with the integer engine (see intops/engine):
  * rounding is half-away-from-zero everywhere;
  * signed symmetric scale is (2**(n-1) - 1) / T so the full calibrated range
    maps onto [-(2**(n-1)-1), 2**(n-1)-1];
  * asymmetric zero points are integers, zp = round(qmin - S * T_lo), so real
    zero stays exactly representable;
  * trainable threshold scales are stored unclipped and evaluated clipped
    (the clip is part of the forward graph).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import layers as L
from .data import Dataset, iter_batches
from .errors import EmptyCalibration, ShapeMismatch
from .model import Graph
from .tensor import (
    INT32_MAX,
    check_finite,
    round_half_away,
    signed_range,
    unsigned_range,
)

SYMMETRIC = "symmetric"
ASYMMETRIC = "asymmetric"
PER_TENSOR = "per_tensor"
PER_CHANNEL = "per_channel"

ALPHA_RANGE = (0.5, 1.0)
ALPHA_T_RANGE_SIGNED = (-0.2, 0.4)
ALPHA_T_RANGE_UNSIGNED = (0.0, 0.4)
ALPHA_R_RANGE = (0.5, 1.0)

# floor for degenerate thresholds from constant calibration data
THRESHOLD_FLOOR = 1e-12

WEIGHT_SITE_SUFFIX = "/weight"


def weight_site(layer_id: str) -> str:
    return layer_id + WEIGHT_SITE_SUFFIX


@dataclass
class QuantParams:
    """Threshold parameters for one quantized tensor site.

    Thresholds and trainables are 1-D arrays of length C (C == 1 for
    per-tensor granularity, C == channel count for per-channel).
    """

    bits: int = 8
    signed: bool = True
    mode: str = SYMMETRIC
    granularity: str = PER_TENSOR
    channel_axis: int = 0
    t_max: Optional[np.ndarray] = None  # symmetric base threshold
    t_lo: Optional[np.ndarray] = None   # asymmetric base left limit
    t_hi: Optional[np.ndarray] = None   # asymmetric base right limit
    alpha: Optional[np.ndarray] = None
    alpha_t: Optional[np.ndarray] = None
    alpha_r: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ValueError(f"bits must be in [2, 8], got {self.bits}")
        if self.mode not in (SYMMETRIC, ASYMMETRIC):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == SYMMETRIC:
            self.t_max = _floored(self.t_max, "t_max")
            if self.alpha is None:
                self.alpha = np.ones_like(self.t_max)
        else:
            self.t_lo = np.atleast_1d(np.asarray(self.t_lo, dtype=np.float64)).copy()
            self.t_hi = np.atleast_1d(np.asarray(self.t_hi, dtype=np.float64)).copy()
            if np.any(self.t_hi < self.t_lo):
                raise ValueError("asymmetric thresholds need t_lo <= t_hi")
            narrow = (self.t_hi - self.t_lo) < THRESHOLD_FLOOR
            if np.any(narrow):
                warnings.warn("degenerate asymmetric range floored", stacklevel=2)
                self.t_hi = np.where(narrow, self.t_lo + THRESHOLD_FLOOR, self.t_hi)
            if self.alpha_t is None:
                self.alpha_t = np.zeros_like(self.t_lo)
            if self.alpha_r is None:
                self.alpha_r = np.ones_like(self.t_lo)

    @property
    def channels(self) -> int:
        base = self.t_max if self.mode == SYMMETRIC else self.t_lo
        return int(base.shape[0])

    def qrange(self) -> tuple[int, int]:
        return signed_range(self.bits) if self.signed else unsigned_range(self.bits)

    def alpha_t_range(self) -> tuple[float, float]:
        return ALPHA_T_RANGE_SIGNED if self.signed else ALPHA_T_RANGE_UNSIGNED


def _floored(t, name: str) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)).copy()
    if np.any(t < 0):
        raise ValueError(f"{name} must be nonnegative")
    if np.any(t < THRESHOLD_FLOOR):
        warnings.warn(f"degenerate {name} floored at {THRESHOLD_FLOOR}", stacklevel=3)
        t = np.maximum(t, THRESHOLD_FLOOR)
    return t


def adjusted_threshold(p: QuantParams) -> tuple[np.ndarray, np.ndarray]:
    """Effective (T_lo, T_hi) after applying the clipped trainable scales."""
    if p.mode == SYMMETRIC:
        t = np.clip(p.alpha, *ALPHA_RANGE) * p.t_max
        lo = -t if p.signed else np.zeros_like(t)
        return lo, t
    r = p.t_hi - p.t_lo
    lo = p.t_lo + np.clip(p.alpha_t, *p.alpha_t_range()) * r
    width = np.clip(p.alpha_r, *ALPHA_R_RANGE) * r
    return lo, lo + width


def _scale(p: QuantParams) -> tuple[np.ndarray, np.ndarray]:
    """(scale, real-valued zero point before rounding), both length C."""
    qmin, qmax = p.qrange()
    lo, hi = adjusted_threshold(p)
    if p.mode == SYMMETRIC:
        # qmax is 2^(n-1)-1 signed, 2^n-1 unsigned; zero point is always 0
        return qmax / hi, np.zeros_like(hi)
    s = (2**p.bits - 1) / (hi - lo)
    return s, qmin - s * lo


def _bshape(vec: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    """Reshape a length-C parameter vector to broadcast along ``axis``."""
    shape = [1] * ndim
    shape[axis] = vec.shape[0]
    return vec.reshape(shape)


def scale_zero_point(p: QuantParams) -> tuple[np.ndarray, np.ndarray]:
    """Evaluation-time (scale, integer zero point) vectors."""
    qmin, qmax = p.qrange()
    s, zp_real = _scale(p)
    zp = np.clip(round_half_away(zp_real), qmin, qmax).astype(np.int64)
    return s, zp


def quantize_tensor(x: np.ndarray, p: QuantParams) -> np.ndarray:
    """Map reals to integer codes (int64 array within the int8-range bounds)."""
    x = np.asarray(x, dtype=np.float64)
    check_finite(x, "quantize input")
    qmin, qmax = p.qrange()
    s, zp = scale_zero_point(p)
    s = _bshape(s, x.ndim, p.channel_axis)
    zp = _bshape(zp, x.ndim, p.channel_axis)
    q = round_half_away(s * x) + zp
    return np.clip(q, qmin, qmax).astype(np.int64)


def dequantize(q: np.ndarray, p: QuantParams) -> np.ndarray:
    """Integer codes back to reals: (q - zp) / S."""
    s, zp = scale_zero_point(p)
    s = _bshape(s, np.ndim(q), p.channel_axis)
    zp = _bshape(zp, np.ndim(q), p.channel_axis)
    return (np.asarray(q, dtype=np.float64) - zp) / s


def fake_quant_forward(x: np.ndarray, p: QuantParams) -> np.ndarray:
    """Quantize-then-dequantize: the simulated-quantization value."""
    return dequantize(quantize_tensor(x, p), p)


def surrogate_forward(x: np.ndarray, p: QuantParams) -> np.ndarray:
    """The round-free surrogate: every round() deleted, every clip() kept.

    This is the function STE gradients differentiate; useful for gradient
    verification by finite differences.
    """
    x = np.asarray(x, dtype=np.float64)
    qmin, qmax = p.qrange()
    s, zp_real = _scale(p)
    zp_s = np.clip(zp_real, qmin, qmax)
    s = _bshape(s, x.ndim, p.channel_axis)
    zp_s = _bshape(zp_s, x.ndim, p.channel_axis)
    v = s * x + zp_s
    return (np.clip(v, qmin, qmax) - zp_s) / s


def ste_backward(
    grad_out: np.ndarray, x: np.ndarray, p: QuantParams, rounded: bool = False
) -> tuple[np.ndarray, Optional[np.ndarray], Optional[np.ndarray], Optional[np.ndarray]]:
    """Gradients through the fake-quant site under the straight-through rule.

    Returns (grad_x, grad_alpha, grad_alpha_t, grad_alpha_r); entries that do
    not apply to the site's mode are None.

    With rounded=False these are the exact gradients of ``surrogate_forward``
    (every round() deleted, every clip() kept), with the clip mask applied to
    the trainables themselves (zero once a trainable saturates its clip
    range). With rounded=True the round() nodes stay in place with unit
    derivative, which keeps the rounding-residual term (x - x_hat) * dS / S
    that pulls thresholds during training; without it a threshold sitting at
    the calibrated maximum would receive no gradient at all.
    """
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != x.shape:
        raise ShapeMismatch(
            f"grad shape {grad_out.shape} does not match input {x.shape}")
    qmin, qmax = p.qrange()
    axis = p.channel_axis
    per_channel = p.channels > 1
    sum_axes = tuple(i for i in range(x.ndim) if i != axis) if per_channel else None

    s_c, zp_real_c = _scale(p)
    lo_c, hi_c = adjusted_threshold(p)
    if rounded:
        zp_s_c = np.clip(round_half_away(zp_real_c), qmin, qmax)
        m_u_c = ((round_half_away(zp_real_c) >= qmin)
                 & (round_half_away(zp_real_c) <= qmax)).astype(np.float64)
    else:
        zp_s_c = np.clip(zp_real_c, qmin, qmax)
        m_u_c = ((zp_real_c >= qmin) & (zp_real_c <= qmax)).astype(np.float64)

    s = _bshape(s_c, x.ndim, axis)
    zp_s = _bshape(zp_s_c, x.ndim, axis)
    if rounded:
        v = round_half_away(s * x) + zp_s
    else:
        v = s * x + zp_s
    m_v = ((v >= qmin) & (v <= qmax)).astype(np.float64)
    c = np.clip(v, qmin, qmax)
    grad_x = grad_out * m_v

    def _param_grad(ds_c: np.ndarray, dl_c: np.ndarray) -> np.ndarray:
        # chain rule through S and T_lo for one trainable, per channel
        lo_b = _bshape(lo_c, x.ndim, axis)
        ds = _bshape(ds_c, x.ndim, axis)
        dl = _bshape(dl_c, x.ndim, axis)
        m_u = _bshape(m_u_c, x.ndim, axis)
        dzp = m_u * (-ds * lo_b - s * dl)
        dv = ds * x + dzp
        dc = m_v * dv
        dy = ((dc - dzp) * s - (c - zp_s) * ds) / (s * s)
        g = grad_out * dy
        if not per_channel:
            return np.array([g.sum()])
        return g.sum(axis=sum_axes).reshape(s_c.shape)

    if p.mode == SYMMETRIC:
        mask_a = ((p.alpha >= ALPHA_RANGE[0]) & (p.alpha <= ALPHA_RANGE[1]))
        dt = p.t_max * mask_a
        ds_c = -(s_c / hi_c) * dt
        dl_c = -dt if p.signed else np.zeros_like(dt)
        return grad_x, _param_grad(ds_c, dl_c), None, None

    r = p.t_hi - p.t_lo
    tr = p.alpha_t_range()
    mask_t = ((p.alpha_t >= tr[0]) & (p.alpha_t <= tr[1]))
    mask_r = ((p.alpha_r >= ALPHA_R_RANGE[0]) & (p.alpha_r <= ALPHA_R_RANGE[1]))
    width = np.clip(p.alpha_r, *ALPHA_R_RANGE) * r
    g_t = _param_grad(np.zeros_like(r), r * mask_t)
    g_r = _param_grad(-(s_c / width) * r * mask_r, np.zeros_like(r))
    return grad_x, None, g_t, g_r


def quantize_bias(b: np.ndarray, s_in: float, s_w) -> np.ndarray:
    """32-bit bias codes: round(S_in * S_w * b) clipped to +-(2**31 - 1)."""
    b = np.asarray(b, dtype=np.float64)
    s_w = np.asarray(s_w, dtype=np.float64)
    q = round_half_away(float(s_in) * s_w * b)
    return np.clip(q, -INT32_MAX, INT32_MAX).astype(np.int64)


# ---------------------------------------------------------------------------
# calibration


@dataclass
class CalibStats:
    """Per-site activation ranges and per-layer weight maxima."""

    activations: dict = field(default_factory=dict)  # site -> [min, max]
    weights: dict = field(default_factory=dict)      # layer -> {per_tensor, per_channel}


def calibrate(g: Graph, ds: Dataset, batch_size: int = 64) -> CalibStats:
    """Forward the calibration set and collect min/max per activation site
    plus max-abs (per tensor and per output channel) for every weight."""
    if len(ds) == 0:
        raise EmptyCalibration("calibration dataset is empty")
    if any(lay.kind == L.BATCH_NORM for lay in g.layers):
        raise ValueError("fold batch norm before calibration")
    g.validate()

    stats = CalibStats()
    for x in iter_batches(ds, batch_size):
        _, values = g.forward(x, want_all=True)
        for site, val in values.items():
            mn, mx = float(val.min()), float(val.max())
            if site in stats.activations:
                old = stats.activations[site]
                stats.activations[site] = [min(old[0], mn), max(old[1], mx)]
            else:
                stats.activations[site] = [mn, mx]

    for lay in g.layers:
        if lay.kind in L.WEIGHTED:
            absw = np.abs(lay.weights)
            per_channel = absw.reshape(absw.shape[0], -1).max(axis=1)
            stats.weights[lay.id] = {
                "per_tensor": float(absw.max()),
                "per_channel": [float(v) for v in per_channel],
            }
    return stats


@dataclass(frozen=True)
class QuantConfig:
    """Global quantization choices for building per-site params."""

    bits: int = 8
    mode: str = SYMMETRIC          # activation sites; weights stay symmetric
    granularity: str = "vector"    # "vector": per-channel conv/dws weights

    def __post_init__(self):
        if self.mode not in (SYMMETRIC, ASYMMETRIC):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.granularity not in ("scalar", "vector"):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if not 2 <= self.bits <= 8:
            raise ValueError("bits must be in [2, 8]")


def site_signedness(g: Graph) -> dict[str, bool]:
    """Sites fed by ReLU/ReLU6 are unsigned; everything else is signed."""
    out = {g.input_id: True}
    for lay in g.layers:
        out[lay.id] = lay.kind not in (L.RELU, L.RELU6)
    return out


def params_from_stats(g: Graph, stats: CalibStats, cfg: QuantConfig) -> dict[str, QuantParams]:
    """Initial QuantParams for every activation and weight site."""
    signedness = site_signedness(g)
    params: dict[str, QuantParams] = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # degenerate-threshold floors
        for site, (mn, mx) in stats.activations.items():
            signed = signedness[site]
            if cfg.mode == SYMMETRIC:
                t = max(abs(mn), abs(mx))
                params[site] = QuantParams(bits=cfg.bits, signed=signed,
                                           mode=SYMMETRIC, t_max=t)
            else:
                params[site] = QuantParams(bits=cfg.bits, signed=signed,
                                           mode=ASYMMETRIC, t_lo=mn, t_hi=mx)
        for lay in g.layers:
            if lay.id not in stats.weights:
                continue
            wstats = stats.weights[lay.id]
            per_channel = (cfg.granularity == "vector"
                           and lay.kind in (L.CONV2D, L.DWSCONV2D))
            if per_channel:
                params[weight_site(lay.id)] = QuantParams(
                    bits=cfg.bits, signed=True, mode=SYMMETRIC,
                    granularity=PER_CHANNEL, channel_axis=0,
                    t_max=np.asarray(wstats["per_channel"]))
            else:
                params[weight_site(lay.id)] = QuantParams(
                    bits=cfg.bits, signed=True, mode=SYMMETRIC,
                    t_max=wstats["per_tensor"])
    return params


# ---------------------------------------------------------------------------
# JSON round trip


def params_to_dict(params: dict[str, QuantParams]) -> dict:
    out = {}
    for site, p in params.items():
        entry = {"bits": p.bits, "signed": p.signed, "mode": p.mode,
                 "granularity": p.granularity, "channel_axis": p.channel_axis}
        for name in ("t_max", "t_lo", "t_hi", "alpha", "alpha_t", "alpha_r"):
            v = getattr(p, name)
            entry[name] = None if v is None else [float(e) for e in v]
        out[site] = entry
    return out


def params_from_dict(doc: dict) -> dict[str, QuantParams]:
    params = {}
    for site, e in doc.items():
        arrays = {name: (None if e[name] is None else np.asarray(e[name], dtype=np.float64))
                  for name in ("t_max", "t_lo", "t_hi", "alpha", "alpha_t", "alpha_r")}
        params[site] = QuantParams(bits=e["bits"], signed=e["signed"], mode=e["mode"],
                                   granularity=e["granularity"],
                                   channel_axis=e["channel_axis"], **arrays)
    return params
