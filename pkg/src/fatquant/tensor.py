"""Tensor conventions and small numeric utilities.

Tensors are plain numpy arrays. The float path uses contiguous float64 in
NCHW layout; quantized codes are carried as int32 (int8-range values for
operands, full int32 for accumulators).
"""

from __future__ import annotations

import numpy as np

from .errors import EmptyTensor, NonFiniteInput

INT32_MAX = 2**31 - 1


def signed_range(bits: int) -> tuple[int, int]:
    """Symmetric signed integer range for ``bits``-bit codes, e.g. [-127, 127]."""
    q = 2 ** (bits - 1) - 1
    return -q, q


def unsigned_range(bits: int) -> tuple[int, int]:
    """Unsigned integer range for ``bits``-bit codes, e.g. [0, 255]."""
    return 0, 2**bits - 1


def round_half_away(x: np.ndarray | float) -> np.ndarray:
    """Round to nearest integer, ties away from zero.

    This is the single rounding rule used everywhere (quantizers, bias
    quantization, requantization), so the float simulation and the integer
    engine agree bit-exactly. Note np.round would round ties to even.
    """
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def check_finite(x: np.ndarray, what: str = "input") -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput(f"non-finite values in {what}")


def histogram(t: np.ndarray, bins: int) -> list[tuple[float, int]]:
    """Equal-width histogram over [min, max]; returns (left_edge, count) pairs.

    A constant tensor degenerates to a single bin holding all elements.
    """
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        raise EmptyTensor("cannot histogram an empty tensor")
    check_finite(t, "histogram input")
    lo = float(t.min())
    hi = float(t.max())
    if lo == hi:
        return [(lo, int(t.size))]
    counts, edges = np.histogram(t, bins=bins, range=(lo, hi))
    return [(float(edges[i]), int(counts[i])) for i in range(bins)]
