"""Minimal reverse-mode differentiation on numpy arrays."""

from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .optim import AdamW
from .params import ParamStore, conv, dense, feed_forward, mlp, multi_head_attention, norm
from .tensor import Tape, Tensor, active_tape, as_tensor

__all__ = [
    "AdamW", "CheckpointError", "GradCheckReport", "ParamStore", "Tape", "Tensor",
    "active_tape", "as_tensor", "conv", "dense", "feed_forward", "grad_check",
    "load_checkpoint", "mlp", "multi_head_attention", "norm", "ops", "save_checkpoint",
]
