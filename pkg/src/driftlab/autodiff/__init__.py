from . import dlt, ops
from .ops import (
    IGNORE_LABEL,
    ShapeError,
    add,
    bilinear_upsample2x,
    conv2d,
    flatten,
    max_pool2x2,
    mean,
    mul,
    mul_scalar,
    relu,
    reshape,
    softmax_cross_entropy,
    sub,
)
from .optim import SGD, NonFiniteGradient, OptimConfig, poly_lr, sgd_step
from .tensor import Tensor, backward, grad_enabled, no_grad

__all__ = [
    "IGNORE_LABEL",
    "NonFiniteGradient",
    "OptimConfig",
    "SGD",
    "ShapeError",
    "Tensor",
    "add",
    "backward",
    "bilinear_upsample2x",
    "conv2d",
    "dlt",
    "flatten",
    "grad_enabled",
    "max_pool2x2",
    "mean",
    "mul",
    "mul_scalar",
    "no_grad",
    "ops",
    "poly_lr",
    "relu",
    "reshape",
    "sgd_step",
    "softmax_cross_entropy",
    "sub",
]
