"""Dense float64 tensors with reverse-mode differentiation."""

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .ops import BatchNormState
from .optim import Adam, OptimizerState, adam_step
from .recurrent import gru_cell, gru_sequence
from .tensor import Tape, Tensor, backward, no_grad, zero_grad

__all__ = [
    "Adam",
    "BatchNormState",
    "GradCheckReport",
    "OptimizerState",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "grad_check",
    "gru_cell",
    "gru_sequence",
    "load_checkpoint",
    "no_grad",
    "ops",
    "save_checkpoint",
    "zero_grad",
]
