"""Dense-tensor computation layer with reverse-mode differentiation."""

from .gradcheck import check_gradients, max_rel_error, numerical_grad
from .ops import (
    BatchNormStats,
    add,
    add_bias,
    batchnorm2d,
    conv2d,
    dropout,
    global_avg_pool,
    index,
    l1_mean,
    matmul,
    mul,
    pointwise,
    relu,
    reshape,
    scale,
    softmax,
    softmax_ce,
    sum_all,
    topk_indices,
    topk_mean,
    upsample_nearest,
)
from .optim import AdamState, adam_step, zero_grad
from .tensor import Tape, Tensor, as_tensor, backward, no_grad

__all__ = [
    "AdamState", "BatchNormStats", "Tape", "Tensor", "adam_step", "add", "add_bias",
    "as_tensor", "backward", "batchnorm2d", "check_gradients", "conv2d", "dropout",
    "global_avg_pool", "index", "l1_mean", "matmul", "max_rel_error", "mul", "no_grad",
    "numerical_grad", "pointwise", "relu", "reshape", "scale", "softmax", "softmax_ce",
    "sum_all", "topk_indices", "topk_mean", "upsample_nearest", "zero_grad",
]
