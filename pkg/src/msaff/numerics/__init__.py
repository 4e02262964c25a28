"""Dense-tensor engine with reverse-mode autodiff."""

from .kernels import BACKEND
from .module import Module
from .tensor import (
    LEAKY_SLOPE,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    conv1d,
    conv2d,
    div,
    exp,
    getitem,
    global_avg,
    global_max,
    leaky_relu,
    matmul,
    max_over_axis,
    max_pool2d,
    mean,
    mul,
    neg,
    relu,
    reshape,
    same_padding,
    sigmoid,
    slice_,
    softmax,
    sqrt,
    sub,
    sum_,
    temporal_conv,
    transpose,
)

# every differentiable op; the gradcheck suite must cover each name
DIFFERENTIABLE_OPS = (
    "add", "sub", "mul", "div", "neg", "sigmoid", "leaky_relu", "relu", "sqrt", "exp",
    "sum", "mean", "max_over_axis", "global_avg", "global_max", "softmax",
    "matmul", "reshape", "transpose", "getitem", "slice", "concat",
    "conv2d", "conv1d", "temporal_conv", "max_pool2d",
)

__all__ = [
    "BACKEND", "DIFFERENTIABLE_OPS", "LEAKY_SLOPE", "Module", "Tensor", "add", "as_tensor", "backward",
    "concat", "conv1d", "conv2d", "div", "exp", "getitem", "global_avg", "global_max", "leaky_relu",
    "matmul", "max_over_axis", "max_pool2d", "mean", "mul", "neg", "relu", "reshape", "same_padding",
    "sigmoid", "slice_", "softmax", "sqrt", "sub", "sum_", "temporal_conv", "transpose",
]
