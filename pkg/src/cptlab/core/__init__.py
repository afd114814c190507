from .optim import Optimizer, OptimizerState, adam, sgd
from .rng import make_rng, truncated_normal
from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    conv2d,
    div,
    dropout,
    embedding,
    exp,
    gelu,
    getitem,
    layer_norm,
    linear,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    softmax,
    softmax_ce,
    sub,
    transpose,
    tsum,
)

__all__ = [
    "Optimizer",
    "OptimizerState",
    "Tensor",
    "adam",
    "add",
    "as_tensor",
    "concat",
    "conv2d",
    "div",
    "dropout",
    "embedding",
    "exp",
    "gelu",
    "getitem",
    "layer_norm",
    "linear",
    "log",
    "make_rng",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "sgd",
    "softmax",
    "softmax_ce",
    "sub",
    "transpose",
    "truncated_normal",
    "tsum",
]
