# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution kernels.

Same contract as _kernels_numpy: float32/float64 in, same dtype out, fully
deterministic single-threaded loops.
"""

import numpy as np

name = "cython"

ctypedef fused real:
    float
    double


def conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w,
                   Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t F = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t OH = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t OW = (W + 2 * pad - kw) // stride + 1
    if real is float:
        out = np.zeros((N, F, OH, OW), dtype=np.float32)
    else:
        out = np.zeros((N, F, OH, OW), dtype=np.float64)
    cdef real[:, :, :, ::1] y = out
    cdef Py_ssize_t n, f, c, oh, ow, i, j, ih0, iw0, ilo, ihi, jlo, jhi, ih
    cdef real acc
    with nogil:
        for n in range(N):
            for f in range(F):
                for oh in range(OH):
                    ih0 = oh * stride - pad
                    ilo = -ih0 if ih0 < 0 else 0
                    ihi = H - ih0 if H - ih0 < kh else kh
                    for ow in range(OW):
                        iw0 = ow * stride - pad
                        jlo = -iw0 if iw0 < 0 else 0
                        jhi = W - iw0 if W - iw0 < kw else kw
                        acc = 0
                        for c in range(C):
                            for i in range(ilo, ihi):
                                ih = ih0 + i
                                for j in range(jlo, jhi):
                                    acc = acc + x[n, c, ih, iw0 + j] * w[f, c, i, j]
                        y[n, f, oh, ow] = acc
    return out


def conv2d_backward_input(real[:, :, :, ::1] gy, real[:, :, :, ::1] w,
                          Py_ssize_t stride, Py_ssize_t pad,
                          Py_ssize_t in_h, Py_ssize_t in_w):
    cdef Py_ssize_t N = gy.shape[0], F = gy.shape[1], OH = gy.shape[2], OW = gy.shape[3]
    cdef Py_ssize_t C = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    if real is float:
        out = np.zeros((N, C, in_h, in_w), dtype=np.float32)
    else:
        out = np.zeros((N, C, in_h, in_w), dtype=np.float64)
    cdef real[:, :, :, ::1] gx = out
    cdef Py_ssize_t n, f, c, oh, ow, i, j, ih0, iw0, ilo, ihi, jlo, jhi, ih
    cdef real g
    with nogil:
        for n in range(N):
            for f in range(F):
                for oh in range(OH):
                    ih0 = oh * stride - pad
                    ilo = -ih0 if ih0 < 0 else 0
                    ihi = in_h - ih0 if in_h - ih0 < kh else kh
                    for ow in range(OW):
                        iw0 = ow * stride - pad
                        jlo = -iw0 if iw0 < 0 else 0
                        jhi = in_w - iw0 if in_w - iw0 < kw else kw
                        g = gy[n, f, oh, ow]
                        if g == 0:
                            continue
                        for c in range(C):
                            for i in range(ilo, ihi):
                                ih = ih0 + i
                                for j in range(jlo, jhi):
                                    gx[n, c, ih, iw0 + j] = gx[n, c, ih, iw0 + j] + g * w[f, c, i, j]
    return out


def conv2d_backward_kernel(real[:, :, :, ::1] x, real[:, :, :, ::1] gy,
                           Py_ssize_t stride, Py_ssize_t pad,
                           Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t F = gy.shape[1], OH = gy.shape[2], OW = gy.shape[3]
    if real is float:
        out = np.zeros((F, C, kh, kw), dtype=np.float32)
    else:
        out = np.zeros((F, C, kh, kw), dtype=np.float64)
    cdef real[:, :, :, ::1] gw = out
    cdef Py_ssize_t n, f, c, oh, ow, i, j, ih0, iw0, ilo, ihi, jlo, jhi, ih
    cdef real g
    with nogil:
        for n in range(N):
            for f in range(F):
                for oh in range(OH):
                    ih0 = oh * stride - pad
                    ilo = -ih0 if ih0 < 0 else 0
                    ihi = H - ih0 if H - ih0 < kh else kh
                    for ow in range(OW):
                        iw0 = ow * stride - pad
                        jlo = -iw0 if iw0 < 0 else 0
                        jhi = W - iw0 if W - iw0 < kw else kw
                        g = gy[n, f, oh, ow]
                        if g == 0:
                            continue
                        for c in range(C):
                            for i in range(ilo, ihi):
                                ih = ih0 + i
                                for j in range(jlo, jhi):
                                    gw[f, c, i, j] = gw[f, c, i, j] + g * x[n, c, ih, iw0 + j]
    return out
