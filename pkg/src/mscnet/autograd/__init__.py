from .tensor import (
    Tensor, add, sub, mul, div, scale, neg, tabs, relu, sigmoid, texp, tlog, clip,
    tsum, mean, elementwise, reshape, transpose, concat, matmul, backward, zero_grads,
    no_grad, count_flops_ctx,
)
from .functional import (
    conv2d, linear, max_pool2d, avg_pool2d, pool2d, global_avg, adaptive_pool2d,
    resize_bilinear, softmax, batch_norm,
)
from .gradcheck import grad_check
from .nn import Parameter, Module

__all__ = [
    "Tensor", "Parameter", "Module", "add", "sub", "mul", "div", "scale", "neg", "tabs", "relu",
    "sigmoid", "texp", "tlog", "clip", "tsum", "mean", "elementwise", "reshape", "transpose",
    "concat", "matmul", "backward", "zero_grads", "no_grad", "count_flops_ctx", "conv2d",
    "linear", "max_pool2d", "avg_pool2d", "pool2d", "global_avg", "adaptive_pool2d",
    "resize_bilinear", "softmax", "batch_norm", "grad_check",
]
