from .tensor import ShapeError, Tensor, astensor, grad_check
from .module import Module, param, uniform_init
from .fft import Spectrum, irfft2, rfft2
from .ops import (
    absolute,
    add,
    batch_norm,
    channel_project,
    clip,
    concat,
    conv2d,
    conv2d_depthwise,
    div,
    exp,
    expm1_over_x,
    gather_last,
    group_norm,
    index_last,
    linear,
    log,
    maximum,
    mul,
    neg,
    pool2d,
    relu,
    replicate_pad,
    reshape,
    sigmoid,
    sorted_stack_sum,
    sqrt,
    stack_last,
    sub,
    tmean,
    transpose,
    tsum,
    upsample_bilinear,
)

__all__ = [
    "ShapeError", "Tensor", "astensor", "grad_check", "Module", "param",
    "uniform_init", "Spectrum", "irfft2", "rfft2", "absolute", "add",
    "batch_norm", "channel_project", "clip", "concat", "conv2d",
    "conv2d_depthwise", "div", "exp", "expm1_over_x", "gather_last",
    "group_norm", "index_last", "linear", "log", "maximum", "mul", "neg",
    "pool2d", "relu", "replicate_pad", "reshape", "sigmoid",
    "sorted_stack_sum", "sqrt", "stack_last", "sub", "tmean", "transpose",
    "tsum", "upsample_bilinear",
]
