from . import ops
from .checkpoint import CheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckResult, gradcheck
from .optim import OptimizerState, clip_by_global_norm, global_norm, optimizer_step, zero_grads
from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "CheckpointError",
    "GradCheckResult",
    "OptimizerState",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "clip_by_global_norm",
    "decode_checkpoint",
    "default_dtype",
    "encode_checkpoint",
    "get_default_dtype",
    "global_norm",
    "gradcheck",
    "is_grad_enabled",
    "load_checkpoint",
    "no_grad",
    "ops",
    "optimizer_step",
    "save_checkpoint",
    "set_default_dtype",
    "zero_grads",
]
