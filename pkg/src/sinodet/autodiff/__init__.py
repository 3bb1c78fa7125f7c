from .tensor import (
    ShapeError,
    Tensor,
    add,
    clamp,
    concat,
    div,
    dot,
    flip,
    grad_enabled,
    mul,
    no_grad,
    reshape,
    square,
    stack,
    sub,
    take,
    texp,
    tlog,
    tmean,
    transpose,
    tsum,
)
from .ops import (
    CE_EPS,
    conv,
    cross_entropy,
    linear_map,
    maxpool3d,
    prelu,
    relu,
    sigmoid,
)
from .optim import AdamState, ParamSet, adam_step
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

__all__ = [
    "ShapeError", "Tensor", "add", "clamp", "concat", "div", "dot", "flip", "grad_enabled",
    "mul", "no_grad", "reshape", "square", "stack", "sub", "take", "texp", "tlog",
    "tmean", "transpose", "tsum", "CE_EPS", "conv", "cross_entropy", "linear_map", "maxpool3d",
    "prelu", "relu", "sigmoid", "AdamState", "ParamSet", "adam_step",
    "CheckpointError", "load_checkpoint", "save_checkpoint",
]
