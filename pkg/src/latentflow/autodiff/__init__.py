from .grad import forward_backward, grad_check, numerical_gradient
from .layers import ACTIVATIONS, MLP, Linear, Module
from .optim import Adam, AdamState, adam_step
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    div,
    elu,
    exp,
    gelu,
    log,
    matmul,
    mean,
    mse,
    mul,
    neg,
    power,
    relu,
    reshape,
    square,
    sub,
    take_rows,
    tanh,
    topological_order,
    tsum,
)

__all__ = [
    "ACTIVATIONS", "Adam", "AdamState", "Linear", "MLP", "Module", "ShapeError", "Tensor",
    "adam_step", "add", "as_tensor", "concat", "div", "elu", "exp", "forward_backward",
    "gelu", "grad_check", "log", "matmul", "mean", "mse", "mul", "neg", "numerical_gradient",
    "power", "relu", "reshape", "square", "sub", "take_rows", "tanh", "topological_order", "tsum",
]
