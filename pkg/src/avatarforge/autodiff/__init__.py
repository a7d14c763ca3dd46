from .checkpoint import CheckpointError, load_weights, save_weights
from .gradcheck import check_gradients, max_relative_error, numerical_gradients
from .optim import AdamState, adam_step, lr_schedule
from .tensor import (
    ShapeError,
    Tensor,
    add,
    avg_pool,
    backward,
    bmv,
    clamp,
    concat,
    conv2d,
    div,
    exp,
    getitem,
    matmul,
    mean,
    mse,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    sparse_matmul,
    sqrt,
    sub,
    tanh,
    tensor,
    transpose,
    tsum,
)

__all__ = [
    "AdamState", "CheckpointError", "ShapeError", "Tensor", "adam_step", "add", "avg_pool",
    "backward", "bmv", "check_gradients", "clamp", "concat", "conv2d", "div", "exp",
    "getitem", "load_weights", "lr_schedule", "matmul", "max_relative_error", "mean", "mse",
    "mul", "numerical_gradients", "relu", "reshape", "save_weights", "scale", "sigmoid",
    "softmax", "sparse_matmul", "sqrt", "sub", "tanh", "tensor", "transpose", "tsum",
]
