# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels (hot path).

Direct-loop implementations with implicit zero padding. Integer kernels
accumulate in int64; they are exact, so they agree bit for bit with the
numpy fallback's exact-float64 accumulation.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv2d_fwd(double[:, :, :, ::1] x, double[:, :, :, ::1] w, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t oc = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n, oc, ho, wo), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out_arr
    cdef Py_ssize_t b, o, i, j, ci, ki, kj, hi, wi
    cdef double acc
    with nogil:
        for b in range(n):
            for o in range(oc):
                for i in range(ho):
                    for j in range(wo):
                        acc = 0.0
                        for ci in range(c):
                            for ki in range(kh):
                                hi = i * stride + ki - pad
                                if hi < 0 or hi >= h:
                                    continue
                                for kj in range(kw):
                                    wi = j * stride + kj - pad
                                    if wi < 0 or wi >= wd:
                                        continue
                                    acc += x[b, ci, hi, wi] * w[o, ci, ki, kj]
                        y[b, o, i, j] = acc
    return out_arr


def conv2d_bwd(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
               double[:, :, :, ::1] gy, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t oc = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = gy.shape[2], wo = gy.shape[3]
    gx_arr = np.zeros((n, c, h, wd), dtype=np.float64)
    gw_arr = np.zeros((oc, c, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t b, o, i, j, ci, ki, kj, hi, wi
    cdef double g
    with nogil:
        for b in range(n):
            for o in range(oc):
                for i in range(ho):
                    for j in range(wo):
                        g = gy[b, o, i, j]
                        if g == 0.0:
                            continue
                        for ci in range(c):
                            for ki in range(kh):
                                hi = i * stride + ki - pad
                                if hi < 0 or hi >= h:
                                    continue
                                for kj in range(kw):
                                    wi = j * stride + kj - pad
                                    if wi < 0 or wi >= wd:
                                        continue
                                    gx[b, ci, hi, wi] += g * w[o, ci, ki, kj]
                                    gw[o, ci, ki, kj] += g * x[b, ci, hi, wi]
    return gx_arr, gw_arr


def dwconv2d_fwd(double[:, :, :, ::1] x, double[:, :, :, ::1] w, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n, c, ho, wo), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out_arr
    cdef Py_ssize_t b, ci, i, j, ki, kj, hi, wi
    cdef double acc
    with nogil:
        for b in range(n):
            for ci in range(c):
                for i in range(ho):
                    for j in range(wo):
                        acc = 0.0
                        for ki in range(kh):
                            hi = i * stride + ki - pad
                            if hi < 0 or hi >= h:
                                continue
                            for kj in range(kw):
                                wi = j * stride + kj - pad
                                if wi < 0 or wi >= wd:
                                    continue
                                acc += x[b, ci, hi, wi] * w[ci, 0, ki, kj]
                        y[b, ci, i, j] = acc
    return out_arr


def dwconv2d_bwd(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                 double[:, :, :, ::1] gy, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = gy.shape[2], wo = gy.shape[3]
    gx_arr = np.zeros((n, c, h, wd), dtype=np.float64)
    gw_arr = np.zeros((c, 1, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t b, ci, i, j, ki, kj, hi, wi
    cdef double g
    with nogil:
        for b in range(n):
            for ci in range(c):
                for i in range(ho):
                    for j in range(wo):
                        g = gy[b, ci, i, j]
                        if g == 0.0:
                            continue
                        for ki in range(kh):
                            hi = i * stride + ki - pad
                            if hi < 0 or hi >= h:
                                continue
                            for kj in range(kw):
                                wi = j * stride + kj - pad
                                if wi < 0 or wi >= wd:
                                    continue
                                gx[b, ci, hi, wi] += g * w[ci, 0, ki, kj]
                                gw[ci, 0, ki, kj] += g * x[b, ci, hi, wi]
    return gx_arr, gw_arr


def conv2d_int(int[:, :, :, ::1] x, int[:, :, :, ::1] w, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t oc = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n, oc, ho, wo), dtype=np.int64)
    cdef long long[:, :, :, ::1] y = out_arr
    cdef Py_ssize_t b, o, i, j, ci, ki, kj, hi, wi
    cdef long long acc
    with nogil:
        for b in range(n):
            for o in range(oc):
                for i in range(ho):
                    for j in range(wo):
                        acc = 0
                        for ci in range(c):
                            for ki in range(kh):
                                hi = i * stride + ki - pad
                                if hi < 0 or hi >= h:
                                    continue
                                for kj in range(kw):
                                    wi = j * stride + kj - pad
                                    if wi < 0 or wi >= wd:
                                        continue
                                    acc += (<long long> x[b, ci, hi, wi]) * w[o, ci, ki, kj]
                        y[b, o, i, j] = acc
    return out_arr


def dwconv2d_int(int[:, :, :, ::1] x, int[:, :, :, ::1] w, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n, c, ho, wo), dtype=np.int64)
    cdef long long[:, :, :, ::1] y = out_arr
    cdef Py_ssize_t b, ci, i, j, ki, kj, hi, wi
    cdef long long acc
    with nogil:
        for b in range(n):
            for ci in range(c):
                for i in range(ho):
                    for j in range(wo):
                        acc = 0
                        for ki in range(kh):
                            hi = i * stride + ki - pad
                            if hi < 0 or hi >= h:
                                continue
                            for kj in range(kw):
                                wi = j * stride + kj - pad
                                if wi < 0 or wi >= wd:
                                    continue
                                acc += (<long long> x[b, ci, hi, wi]) * w[ci, 0, ki, kj]
                        y[b, ci, i, j] = acc
    return out_arr
