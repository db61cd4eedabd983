"""Interleaved perceive/decide transformer for offline sequential decision making."""

from .network import Capture, PDiTConfig, TrajectoryContext, forward, init_params
from .trainer import TrainConfig, evaluate, train, train_multitask

__all__ = [
    "Capture",
    "PDiTConfig",
    "TrainConfig",
    "TrajectoryContext",
    "evaluate",
    "forward",
    "init_params",
    "train",
    "train_multitask",
]

__version__ = "0.1.0"
