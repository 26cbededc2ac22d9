"""Gradient gating for deep multi-rate graph learning, plus an oversmoothing lab."""

from .graph import DomainError, Graph, grid2d
from .gating import G2Config, G2Model, family_config, layer_step, propagate
from .training import TrainConfig, TrainResult, train

__all__ = [
    "DomainError",
    "Graph",
    "grid2d",
    "G2Config",
    "G2Model",
    "family_config",
    "layer_step",
    "propagate",
    "TrainConfig",
    "TrainResult",
    "train",
]
__version__ = "0.1.0"
