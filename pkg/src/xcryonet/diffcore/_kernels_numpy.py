"""Pure numpy convolution kernels (fallback backend).

Forward and kernel-gradient use im2col plus one matrix product; the input
gradient scatters per kernel tap so no atomic adds are needed. All three
accept float32 or float64 and preserve the input dtype.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

name = "numpy"


def _cols(x, kh, kw, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw), oh, ow


def conv2d_forward(x, w, stride, pad):
    n = x.shape[0]
    f, _, kh, kw = w.shape
    cols, oh, ow = _cols(x, kh, kw, stride, pad)
    y = cols @ w.reshape(f, -1).T
    return np.ascontiguousarray(y.reshape(n, oh, ow, f).transpose(0, 3, 1, 2))


def conv2d_backward_input(gy, w, stride, pad, in_h, in_w):
    n, f, oh, ow = gy.shape
    _, c, kh, kw = w.shape
    hp, wp = in_h + 2 * pad, in_w + 2 * pad
    gxp = np.zeros((n, c, hp, wp), dtype=gy.dtype)
    flat = gy.transpose(0, 2, 3, 1).reshape(-1, f)
    for i in range(kh):
        rows = slice(i, i + (oh - 1) * stride + 1, stride)
        for j in range(kw):
            m = (flat @ w[:, :, i, j]).reshape(n, oh, ow, c).transpose(0, 3, 1, 2)
            gxp[:, :, rows, j : j + (ow - 1) * stride + 1 : stride] += m
    return np.ascontiguousarray(gxp[:, :, pad : pad + in_h, pad : pad + in_w])


def conv2d_backward_kernel(x, gy, stride, pad, kh, kw):
    n, f, oh, ow = gy.shape
    c = x.shape[1]
    cols, oh2, ow2 = _cols(x, kh, kw, stride, pad)
    assert (oh2, ow2) == (oh, ow), "output grid mismatch between x and gy"
    gw = gy.transpose(1, 0, 2, 3).reshape(f, -1) @ cols
    return np.ascontiguousarray(gw.reshape(f, c, kh, kw))
