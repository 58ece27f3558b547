"""Dense float64 numerics with reverse-mode autodiff."""

from . import ops
from .autodiff import (
    backward,
    check_finite,
    forward_record,
    gradient_check,
    numeric_gradient,
    per_sample_gradient_matrix,
    per_sample_gradients,
    value_and_grad,
)
from .layers import Activation, Dense, LayerNorm, sinusoidal_embedding
from .params import ParamLayout, ParamVector, Segment, dot, dumps, load, loads, save
from .tape import Tape, Var, value

__all__ = [
    "Activation", "Dense", "LayerNorm", "ParamLayout", "ParamVector", "Segment", "Tape", "Var",
    "backward", "check_finite", "dot", "dumps", "forward_record", "gradient_check", "load",
    "loads", "numeric_gradient", "ops",
    "per_sample_gradient_matrix", "per_sample_gradients", "save", "sinusoidal_embedding",
    "value", "value_and_grad",
]
