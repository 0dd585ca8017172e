"""Pure-numpy convolution kernels (fallback backend).

Float kernels use im2col + BLAS matmul. Integer kernels run the same gather
on float64 arrays holding integer values: every product and partial sum is an
exact integer far below 2**53, so results are exact regardless of summation
order and match the compiled backend bit for bit.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Largest |accumulator| for which float64 integer arithmetic stays exact.
_EXACT_LIMIT = float(2**53)


def _pad2d(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # [N, C, Ho, Wo, kh, kw] strided view of the padded input
    v = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    v = _windows(x, kh, kw, stride)
    n, c, ho, wo = v.shape[:4]
    cols = v.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols)


def conv2d_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    n, _, h, wdim = x.shape
    oc, _, kh, kw = w.shape
    xp = _pad2d(x, pad)
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wdim + 2 * pad - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride)
    y = cols @ w.reshape(oc, -1).T
    return np.ascontiguousarray(y.reshape(n, ho, wo, oc).transpose(0, 3, 1, 2))


def conv2d_bwd(
    x: np.ndarray, w: np.ndarray, gy: np.ndarray, stride: int, pad: int
) -> tuple[np.ndarray, np.ndarray]:
    n, c, h, wdim = x.shape
    oc, _, kh, kw = w.shape
    _, _, ho, wo = gy.shape
    xp = _pad2d(x, pad)
    cols = _im2col(xp, kh, kw, stride)
    gy_mat = np.ascontiguousarray(gy.transpose(0, 2, 3, 1).reshape(-1, oc))

    gw = (gy_mat.T @ cols).reshape(oc, c, kh, kw)

    gcols = (gy_mat @ w.reshape(oc, -1)).reshape(n, ho, wo, c, kh, kw)
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += (
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    gx = gxp[:, :, pad : pad + h, pad : pad + wdim] if pad else gxp
    return np.ascontiguousarray(gx), gw


def dwconv2d_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    xp = _pad2d(x, pad)
    kh, kw = w.shape[2], w.shape[3]
    v = _windows(xp, kh, kw, stride)
    return np.einsum("nchwij,cij->nchw", v, w[:, 0], optimize=True)


def dwconv2d_bwd(
    x: np.ndarray, w: np.ndarray, gy: np.ndarray, stride: int, pad: int
) -> tuple[np.ndarray, np.ndarray]:
    _, _, h, wdim = x.shape
    kh, kw = w.shape[2], w.shape[3]
    _, _, ho, wo = gy.shape
    xp = _pad2d(x, pad)
    v = _windows(xp, kh, kw, stride)

    gw = np.einsum("nchw,nchwij->cij", gy, v, optimize=True)[:, None]

    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += (
                gy * w[:, 0, i, j][None, :, None, None]
            )
    gx = gxp[:, :, pad : pad + h, pad : pad + wdim] if pad else gxp
    return np.ascontiguousarray(gx), gw


def conv2d_int(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Integer convolution; x is zero-point-centered codes, result int64."""
    _check_exact(x, w)
    acc = conv2d_fwd(x.astype(np.float64), w.astype(np.float64), stride, pad)
    return acc.astype(np.int64)


def dwconv2d_int(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    _check_exact(x, w)
    acc = dwconv2d_fwd(x.astype(np.float64), w.astype(np.float64), stride, pad)
    return acc.astype(np.int64)


def _check_exact(x: np.ndarray, w: np.ndarray) -> None:
    # worst-case |acc| bound; guarantees float64 holds every partial sum exactly
    taps = w.shape[1] * w.shape[2] * w.shape[3]
    xmax = float(np.abs(x).max(initial=0))
    wmax = float(np.abs(w).max(initial=0))
    if taps * xmax * wmax >= _EXACT_LIMIT:
        raise OverflowError("integer convolution exceeds exact float64 range")
