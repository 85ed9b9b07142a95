"""Tangent model composition: linearized fine-tuning, composition by delta arithmetic, and unlearning."""

from .params import ParamVector, add, axpy, convex_combine, scale
from .network import BaseModel, NetworkSpec, forward, jvp_forward, mlp_spec, vjp_backward
from .losses import LossSpec, loss_grad, loss_value, softmax
from .tangent import (
    CompositionWeights,
    TangentModel,
    compose_many,
    compose_pair,
    restrict_to_head,
    tangent_forward,
    unlearn,
)

__version__ = "0.1.0"

__all__ = [
    "ParamVector", "add", "axpy", "convex_combine", "scale",
    "BaseModel", "NetworkSpec", "forward", "jvp_forward", "mlp_spec", "vjp_backward",
    "LossSpec", "loss_grad", "loss_value", "softmax",
    "CompositionWeights", "TangentModel", "compose_many", "compose_pair", "restrict_to_head",
    "tangent_forward", "unlearn",
]
