"""Kernel backend selection.

The compiled extension is preferred when importable; set FATQUANT_KERNELS to
"numpy" or "compiled" to force a choice. Float results may differ between
backends in the last bits (different summation order); integer kernels are
exact and therefore identical.
"""

from __future__ import annotations

import os

import numpy as np

from . import kernels_numpy

_fast = None
_choice = os.environ.get("FATQUANT_KERNELS", "auto").lower()
if _choice not in ("auto", "compiled", "numpy"):
    raise ValueError(f"FATQUANT_KERNELS must be auto|compiled|numpy, got {_choice!r}")
if _choice in ("auto", "compiled"):
    try:
        from . import _fastkernels as _fast  # type: ignore[attr-defined]
    except ImportError:
        if _choice == "compiled":
            raise
        _fast = None

KERNEL_BACKEND = "compiled" if _fast is not None else "numpy"


def _f64(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def _i32(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.int32)


def conv2d_fwd(x, w, stride: int, pad: int) -> np.ndarray:
    if _fast is not None:
        return _fast.conv2d_fwd(_f64(x), _f64(w), stride, pad)
    return kernels_numpy.conv2d_fwd(_f64(x), _f64(w), stride, pad)


def conv2d_bwd(x, w, gy, stride: int, pad: int):
    if _fast is not None:
        return _fast.conv2d_bwd(_f64(x), _f64(w), _f64(gy), stride, pad)
    return kernels_numpy.conv2d_bwd(_f64(x), _f64(w), _f64(gy), stride, pad)


def dwconv2d_fwd(x, w, stride: int, pad: int) -> np.ndarray:
    if _fast is not None:
        return _fast.dwconv2d_fwd(_f64(x), _f64(w), stride, pad)
    return kernels_numpy.dwconv2d_fwd(_f64(x), _f64(w), stride, pad)


def dwconv2d_bwd(x, w, gy, stride: int, pad: int):
    if _fast is not None:
        return _fast.dwconv2d_bwd(_f64(x), _f64(w), _f64(gy), stride, pad)
    return kernels_numpy.dwconv2d_bwd(_f64(x), _f64(w), _f64(gy), stride, pad)


def conv2d_int(x, w, stride: int, pad: int) -> np.ndarray:
    if _fast is not None:
        return _fast.conv2d_int(_i32(x), _i32(w), stride, pad)
    return kernels_numpy.conv2d_int(np.asarray(x), np.asarray(w), stride, pad)


def dwconv2d_int(x, w, stride: int, pad: int) -> np.ndarray:
    if _fast is not None:
        return _fast.dwconv2d_int(_i32(x), _i32(w), stride, pad)
    return kernels_numpy.dwconv2d_int(np.asarray(x), np.asarray(w), stride, pad)
