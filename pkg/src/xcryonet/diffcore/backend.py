"""Convolution kernel backend selection.

The compiled extension is preferred when importable; the numpy fallback is
always available. Set XCRYONET_KERNELS=numpy|cython to force a choice, or
call use_backend() at runtime (used by tests and the kernel benchmark).
"""

from __future__ import annotations

import os

from . import _kernels_numpy

_BACKENDS = {"numpy": _kernels_numpy}

try:
    from . import _convkernels as _compiled
except ImportError:
    _compiled = None
else:
    _BACKENDS["cython"] = _compiled


def _resolve(choice: str):
    if choice == "auto":
        return _BACKENDS.get("cython", _kernels_numpy)
    if choice not in _BACKENDS:
        raise ValueError(
            f"kernel backend {choice!r} not available; have {sorted(_BACKENDS)}"
        )
    return _BACKENDS[choice]


_active = _resolve(os.environ.get("XCRYONET_KERNELS", "auto").lower())


def backend_name() -> str:
    return _active.name


def available_backends() -> tuple:
    return tuple(sorted(_BACKENDS))


def get_backend(name: str):
    return _resolve(name)


def use_backend(name: str) -> str:
    """Switch the active backend; returns the previous backend's name."""
    global _active
    previous = _active.name
    _active = _resolve(name)
    return previous


def conv2d_forward(x, w, stride, pad):
    return _active.conv2d_forward(x, w, stride, pad)


def conv2d_backward_input(gy, w, stride, pad, in_h, in_w):
    return _active.conv2d_backward_input(gy, w, stride, pad, in_h, in_w)


def conv2d_backward_kernel(x, gy, stride, pad, kh, kw):
    return _active.conv2d_backward_kernel(x, gy, stride, pad, kh, kw)
