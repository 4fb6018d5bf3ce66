from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .optim import AdamWState, OptimizerConfig, adamw_step, warmup_lr
from .tensor import (
    DimensionError,
    InvalidBatchError,
    NonFiniteError,
    Tensor,
    add,
    concat,
    cross_entropy,
    exp,
    gelu,
    index,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    softmax,
    sub,
    take_rows,
    tanh,
    transpose,
    tsum,
)

__all__ = [
    "AdamWState",
    "Checkpoint",
    "CheckpointError",
    "DimensionError",
    "InvalidBatchError",
    "NonFiniteError",
    "OptimizerConfig",
    "Tensor",
    "adamw_step",
    "add",
    "concat",
    "cross_entropy",
    "exp",
    "gelu",
    "index",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "save_checkpoint",
    "softmax",
    "sub",
    "take_rows",
    "tanh",
    "transpose",
    "tsum",
    "warmup_lr",
]
