"""Reverse-mode differentiation engine and the small gaze network built on it."""

from .engine import GraphUsageError, NonFiniteError, Tensor, backward as backward_tensor
from .gradcheck import GradCheckReport, grad_check
from .network import (CheckpointError, ConfigError, NetworkConfig, NetworkOutput, Trace,
                      backward, count_params, forward, init_params, layer_shapes,
                      load_checkpoint, save_checkpoint)

__all__ = [
    "CheckpointError", "ConfigError", "GradCheckReport", "GraphUsageError", "NetworkConfig",
    "NetworkOutput", "NonFiniteError", "Tensor", "Trace", "backward", "backward_tensor",
    "count_params", "forward", "grad_check", "init_params", "layer_shapes",
    "load_checkpoint", "save_checkpoint",
]
