"""Desk-scale continual-pretraining laboratory.

Small decoder-only transformer on a float64 autodiff engine, with layer and
unit importance probing, selective layer expansion with function-preserving
initialization, unit-wise decoupled learning rates, and the accompanying
evaluation and analysis tooling.
"""

__version__ = "0.1.0"

from .tensor import Graph, Tensor, fd_gradient_oracle
from .model import (
    Model,
    ModelConfig,
    UNIT_NAMES,
    forward_logits,
    init_model,
    lm_loss,
    unit_view,
)

__all__ = [
    "Graph", "Tensor", "fd_gradient_oracle",
    "Model", "ModelConfig", "UNIT_NAMES",
    "forward_logits", "init_model", "lm_loss", "unit_view",
]
