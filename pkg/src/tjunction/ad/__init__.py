from .engine import (
    Tensor,
    affine,
    backward,
    clip,
    concat,
    exp,
    gather,
    grad_enabled,
    log,
    log_softmax,
    matmul,
    max_pool_rows,
    mean_pool_rows,
    minimum,
    mul,
    no_grad,
    relu,
    sigmoid,
    softmax,
    take_rows,
    tanh,
    tmax,
    tmean,
    tsum,
)
from .optim import BETA1, BETA2, EPS, ParamStore
from .checkpoint import FORMAT, load_checkpoint, save_checkpoint
from .gradcheck import finite_difference_check

__all__ = [
    "BETA1",
    "BETA2",
    "EPS",
    "FORMAT",
    "ParamStore",
    "Tensor",
    "affine",
    "backward",
    "clip",
    "concat",
    "exp",
    "finite_difference_check",
    "gather",
    "grad_enabled",
    "load_checkpoint",
    "log",
    "log_softmax",
    "matmul",
    "max_pool_rows",
    "mean_pool_rows",
    "minimum",
    "mul",
    "no_grad",
    "relu",
    "save_checkpoint",
    "sigmoid",
    "softmax",
    "take_rows",
    "tanh",
    "tmax",
    "tmean",
    "tsum",
]
