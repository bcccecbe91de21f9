"""Sparse neural networks via L0 regularization with ARM/AR gate gradients."""

from .gates import GateBank, GateFamily, GateFunction, GateLayer, eval_gate, eval_gate_grad, invert_gate
from .estimators import BinaryObjective, ar_grad, arm_grad, estimator_bench, exact_grad, reinforce_grad
from .nn import GatedNetwork, build_mlp, build_preset
from .objective import RegularizationSpec, objective_step
from .trainer import GateInit, TrainConfig, init_gates, train

__version__ = "0.1.0"

__all__ = [
    "BinaryObjective",
    "GateBank",
    "GateFamily",
    "GateFunction",
    "GateInit",
    "GateLayer",
    "GatedNetwork",
    "RegularizationSpec",
    "TrainConfig",
    "ar_grad",
    "arm_grad",
    "build_mlp",
    "build_preset",
    "estimator_bench",
    "eval_gate",
    "eval_gate_grad",
    "exact_grad",
    "init_gates",
    "invert_gate",
    "objective_step",
    "reinforce_grad",
    "train",
]
