"""Self-contained reverse-mode autodiff on numpy arrays."""

from .tensor import (
    Tensor,
    add,
    backward,
    concat,
    getitem,
    grad_enabled,
    matmul,
    mul,
    no_grad,
    relu,
    repeat_groups,
    reshape,
    sigmoid,
    tanh,
    texp,
    tlog,
    tmean,
    transpose,
    tsum,
)
from .ops import (
    bilstm,
    conv2d,
    layer_norm,
    linear,
    lstm_direction,
    multi_head_self_attention,
    softmax,
    softmax_cross_entropy,
)
from .optim import Adam, DivergenceError
from .checkpoint import CheckpointError, load_checkpoint, restore, save_checkpoint
from .gradcheck import GradcheckReport, gradcheck

__all__ = [
    "Adam",
    "CheckpointError",
    "DivergenceError",
    "GradcheckReport",
    "Tensor",
    "add",
    "backward",
    "bilstm",
    "concat",
    "conv2d",
    "getitem",
    "grad_enabled",
    "gradcheck",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "lstm_direction",
    "matmul",
    "mul",
    "multi_head_self_attention",
    "no_grad",
    "relu",
    "repeat_groups",
    "reshape",
    "restore",
    "save_checkpoint",
    "sigmoid",
    "softmax",
    "softmax_cross_entropy",
    "tanh",
    "texp",
    "tlog",
    "tmean",
    "transpose",
    "tsum",
]
