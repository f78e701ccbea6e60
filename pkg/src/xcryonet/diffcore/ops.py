"""Differentiable operations over Tensor.

Conventions: conv2d is cross-correlation with zero padding and floor output
sizing; transpose_conv2d is its gradient twin with kernel layout
(C_in, C_out, kh, kw); relu uses subgradient 0 at the kink; sigmoid output
is clipped into the open interval (0, 1); channel_max_pool routes gradient
to the first maximal channel.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..errors import ShapeMismatch
from . import backend
from .tensor import Tensor, make_node

_UPSAMPLE_CACHE = {}


def _as_tensor(x, like=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _same_dtype(*tensors):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeMismatch(f"mixed dtypes {sorted(map(str, dtypes))}")


def _contig(a):
    return np.ascontiguousarray(a)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _same_dtype(a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return make_node(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _same_dtype(a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return make_node(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _same_dtype(a, b)
    out = a.data * b.data

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return make_node(out, (a, b), bwd)


def add_n(tensors) -> Tensor:
    """Sum of any number of same-shape tensors."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("add_n needs at least one tensor")
    _same_dtype(*tensors)
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out = out + t.data

    def bwd(g):
        return tuple(g for _ in tensors)

    return make_node(out, tuple(tensors), bwd)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    out = x.data.reshape(shape)
    in_shape = x.data.shape

    def bwd(g):
        return (g.reshape(in_shape),)

    return make_node(out, (x,), bwd)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    # the complement test keeps NaN inputs NaN instead of flushing them to
    # zero, so numerical corruption stays visible downstream
    mask = ~(x.data <= 0)
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def bwd(g):
        return (g * mask,)

    return make_node(out, (x,), bwd)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    lo = np.nextafter(x.data.dtype.type(0), x.data.dtype.type(1))
    hi = np.nextafter(x.data.dtype.type(1), x.data.dtype.type(0))
    out = np.clip(expit(x.data), lo, hi).astype(x.data.dtype, copy=False)

    def bwd(g):
        return (g * out * (1 - out),)

    return make_node(out, (x,), bwd)


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Strided 2D cross-correlation. x: (N,C,H,W); w: (F,C,kh,kw)."""
    x, w = _as_tensor(x), _as_tensor(w)
    _same_dtype(x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d needs 4D tensors, got {x.shape} and {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    n, c, h, width = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeMismatch(f"input has {c} channels, kernel expects {cw}")
    if kh > h + 2 * pad or kw > width + 2 * pad:
        raise ShapeMismatch(f"kernel {kh}x{kw} larger than padded input")
    out = backend.conv2d_forward(_contig(x.data), _contig(w.data), stride, pad)

    def bwd(g):
        g = _contig(g)
        gx = (
            backend.conv2d_backward_input(g, _contig(w.data), stride, pad, h, width)
            if x.requires_grad
            else None
        )
        gw = (
            backend.conv2d_backward_kernel(_contig(x.data), g, stride, pad, kh, kw)
            if w.requires_grad
            else None
        )
        return gx, gw

    return make_node(out, (x, w), bwd)


def transpose_conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution. x: (N,C_in,h,w); w: (C_in,C_out,kh,kw).

    Output spatial size is (h-1)*stride - 2*pad + kh.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    _same_dtype(x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"transpose_conv2d needs 4D tensors, got {x.shape} and {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    n, c, h, width = x.shape
    cw, cout, kh, kw = w.shape
    if cw != c:
        raise ShapeMismatch(f"input has {c} channels, kernel expects {cw}")
    out_h = (h - 1) * stride - 2 * pad + kh
    out_w = (width - 1) * stride - 2 * pad + kw
    if out_h < 1 or out_w < 1:
        raise ShapeMismatch(f"output size {out_h}x{out_w} is empty")
    out = backend.conv2d_backward_input(
        _contig(x.data), _contig(w.data), stride, pad, out_h, out_w
    )

    def bwd(g):
        g = _contig(g)
        gx = (
            backend.conv2d_forward(g, _contig(w.data), stride, pad)
            if x.requires_grad
            else None
        )
        gw = (
            backend.conv2d_backward_kernel(g, _contig(x.data), stride, pad, kh, kw)
            if w.requires_grad
            else None
        )
        return gx, gw

    return make_node(out, (x, w), bwd)


def global_avg_pool(x) -> Tensor:
    """(N,C,H,W) -> (N,C) spatial mean."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"global_avg_pool needs 4D input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        scaled = (g / (h * w)).astype(x.data.dtype)
        return (np.broadcast_to(scaled[:, :, None, None], x.data.shape).copy(),)

    return make_node(out, (x,), bwd)


def channel_max_pool(x, channel_range) -> Tensor:
    """Max over a half-open channel slice -> (N,1,H,W).

    Gradient goes to the first channel attaining the maximum.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"channel_max_pool needs 4D input, got {x.shape}")
    c0, c1 = channel_range
    if not 0 <= c0 < c1 <= x.shape[1]:
        raise ShapeMismatch(f"channel range [{c0}, {c1}) invalid for {x.shape[1]} channels")
    sl = x.data[:, c0:c1]
    out = sl.max(axis=1, keepdims=True)
    argmax = sl.argmax(axis=1)  # first maximal channel

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx[:, c0:c1], argmax[:, None], g, axis=1)
        return (gx,)

    return make_node(out, (x,), bwd)


def _interp_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic bilinear weights with half-pixel center alignment."""
    key = (n_in, n_out)
    cached = _UPSAMPLE_CACHE.get(key)
    if cached is not None:
        return cached
    w = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(int)
    frac = src - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    rows = np.arange(n_out)
    np.add.at(w, (rows, i0), 1.0 - frac)
    np.add.at(w, (rows, i1), frac)
    _UPSAMPLE_CACHE[key] = w
    return w


def upsample_bilinear(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of (N,C,h,w) with half-pixel sample centers."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"upsample_bilinear needs 4D input, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    h, w = x.shape[2], x.shape[3]
    wh = _interp_weights(h, out_h).astype(x.data.dtype)
    ww = _interp_weights(w, out_w).astype(x.data.dtype)
    out = np.einsum("oh,nchw,pw->ncop", wh, x.data, ww, optimize=True)

    def bwd(g):
        return (np.einsum("oh,ncop,pw->nchw", wh, g, ww, optimize=True),)

    return make_node(out, (x,), bwd)


def upsample_nearest(x, out_h: int, out_w: int) -> Tensor:
    """Nearest-neighbor resize of (N,C,h,w) with half-pixel sample centers."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"upsample_nearest needs 4D input, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    h, w = x.shape[2], x.shape[3]
    rows = np.minimum(((np.arange(out_h) + 0.5) * (h / out_h)).astype(int), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * (w / out_w)).astype(int), w - 1)
    out = x.data[:, :, rows[:, None], cols[None, :]]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), slice(None), rows[:, None], cols[None, :]), g)
        return (gx,)

    return make_node(out, (x,), bwd)


def fully_connected(x, w, b) -> Tensor:
    """x @ w + b with x: (N,D), w: (D,E), b: (E,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    _same_dtype(x, w, b)
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ShapeMismatch(
            f"fully_connected shapes: x {x.shape}, w {w.shape}, b {b.shape}"
        )
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeMismatch(
            f"fully_connected dims disagree: x {x.shape}, w {w.shape}, b {b.shape}"
        )
    out = x.data @ w.data + b.data

    def bwd(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return make_node(out, (x, w, b), bwd)


def mse(a, b) -> Tensor:
    """Mean squared difference over all elements; returns a scalar tensor."""
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mse shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff.astype(np.float64) ** 2).mean(), dtype=a.dtype)

    def bwd(g):
        scale = (2.0 / n) * float(g)
        ga = (scale * diff).astype(a.dtype)
        return ga, -ga

    return make_node(out, (a, b), bwd)


def masked_mse(pred, target, mask) -> Tensor:
    """Mean squared error over elements where mask is True.

    target and mask are plain arrays (no gradient). With an empty mask the
    result is a constant zero that contributes no gradient.
    """
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    mask = np.asarray(mask, dtype=bool)
    if target.shape != pred.shape or mask.shape != pred.shape:
        raise ShapeMismatch(
            f"masked_mse shapes: pred {pred.shape}, target {target.shape}, mask {mask.shape}"
        )
    count = int(mask.sum())
    if count == 0:
        return Tensor(np.asarray(0.0, dtype=pred.dtype))
    diff = np.where(mask, pred.data - np.where(mask, target, 0), 0)
    out = np.asarray((diff.astype(np.float64) ** 2).sum() / count, dtype=pred.dtype)

    def bwd(g):
        return ((2.0 / count) * float(g) * diff.astype(pred.dtype),)

    return make_node(out, (pred,), bwd)


def concat_channels(tensors) -> Tensor:
    """Concatenate (N,C_i,H,W) tensors along the channel axis."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    _same_dtype(*tensors)
    for t in tensors:
        if t.ndim != 4:
            raise ShapeMismatch(f"concat_channels needs 4D tensors, got {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return make_node(out, tuple(tensors), bwd)


def detach(x) -> Tensor:
    return _as_tensor(x).detach()
