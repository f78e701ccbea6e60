"""Dense tensor core: autodiff, kernels, parameters, optimizer."""

from .backend import available_backends, backend_name, get_backend, use_backend
from .ops import (
    add,
    add_n,
    channel_max_pool,
    concat_channels,
    conv2d,
    detach,
    fully_connected,
    global_avg_pool,
    masked_mse,
    mse,
    mul,
    relu,
    reshape,
    sigmoid,
    sub,
    transpose_conv2d,
    upsample_bilinear,
    upsample_nearest,
)
from .params import Adam, ParamStore, adam_step
from .tensor import Tensor, backward, grad_enabled, no_grad

__all__ = [
    "Adam",
    "ParamStore",
    "Tensor",
    "adam_step",
    "add",
    "add_n",
    "available_backends",
    "backend_name",
    "backward",
    "channel_max_pool",
    "concat_channels",
    "conv2d",
    "detach",
    "fully_connected",
    "get_backend",
    "global_avg_pool",
    "grad_enabled",
    "masked_mse",
    "mse",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "sigmoid",
    "sub",
    "transpose_conv2d",
    "upsample_bilinear",
    "upsample_nearest",
    "use_backend",
]
