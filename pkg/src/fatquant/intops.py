"""Canonical integer-domain layer semantics.

Both the fake-quant simulation (quantized student) and the int8 engine call
these functions, so "engine matches simulation bit for bit" holds by
construction: accumulators are exact integers, and each requantization is the
same float64 expression on the same precomputed multiplier.
"""

from __future__ import annotations

import numpy as np

from .errors import AccumulatorOverflow
from .layers import RELU6_SATURATION
from .tensor import INT32_MAX, round_half_away


def check_acc(acc: np.ndarray, layer_id: str) -> None:
    if acc.size and int(np.abs(acc).max()) > INT32_MAX:
        raise AccumulatorOverflow(f"layer {layer_id!r}: int32 accumulator overflow")


def requantize(acc: np.ndarray, mult, zp_out: int, qmin: int, qmax: int) -> np.ndarray:
    """acc (int) -> output codes: clip(round(mult * acc) + zp, qmin, qmax)."""
    q = round_half_away(np.asarray(mult) * acc.astype(np.float64)) + zp_out
    return np.clip(q, qmin, qmax).astype(np.int64)


def int_relu(d: np.ndarray, m: float, zp_out: int, qmin: int, qmax: int) -> np.ndarray:
    """ReLU on centered input codes d = q_in - zp_in; m = S_out / S_in."""
    u = np.maximum(round_half_away(m * d.astype(np.float64)), 0.0)
    return np.clip(u + zp_out, qmin, qmax).astype(np.int64)


def int_relu6(
    d: np.ndarray, m: float, s_out: float, zp_out: int, qmin: int, qmax: int
) -> np.ndarray:
    """ReLU6: additionally clamp at the code for the saturation constant."""
    six = round_half_away(s_out * RELU6_SATURATION)
    u = np.minimum(np.maximum(round_half_away(m * d.astype(np.float64)), 0.0), six)
    return np.clip(u + zp_out, qmin, qmax).astype(np.int64)


def int_avgpool(
    d: np.ndarray, window: int, stride: int, m_pool: float,
    zp_out: int, qmin: int, qmax: int,
) -> np.ndarray:
    """Average pool: integer window sums, then one requantization with
    m_pool = S_out / (S_in * window**2)."""
    from numpy.lib.stride_tricks import sliding_window_view

    v = sliding_window_view(d, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    sums = v.sum(axis=(4, 5), dtype=np.int64)
    return requantize(sums, m_pool, zp_out, qmin, qmax)


def int_add(
    d1: np.ndarray, m1: float, d2: np.ndarray, m2: float,
    zp_out: int, qmin: int, qmax: int,
) -> np.ndarray:
    """Two-input add with one rounding: round(m1*d1 + m2*d2) + zp."""
    u = round_half_away(m1 * d1.astype(np.float64) + m2 * d2.astype(np.float64))
    return np.clip(u + zp_out, qmin, qmax).astype(np.int64)


def int_fc(d: np.ndarray, w_q: np.ndarray) -> np.ndarray:
    """Integer matmul accumulator via exact float64 (values stay below 2**53)."""
    d2 = d.reshape(d.shape[0], -1).astype(np.float64)
    acc = d2 @ w_q.astype(np.float64).T
    return acc.astype(np.int64)
