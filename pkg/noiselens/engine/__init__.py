from noiselens.engine.functional import (
    conv2d,
    conv_transpose2d,
    instance_norm,
    matmul,
    softmax,
)
from noiselens.engine.module import Module, frozen
from noiselens.engine.optim import Adam, AdamState, adam_step
from noiselens.engine.tensor import (
    DTYPE,
    Tape,
    Tensor,
    as_tensor,
    backward,
    concat,
    elementwise,
    softplus,
)

__all__ = [
    "DTYPE",
    "Adam",
    "AdamState",
    "Module",
    "Tape",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "elementwise",
    "frozen",
    "instance_norm",
    "matmul",
    "softmax",
    "softplus",
]
