from . import ops
from .gradcheck import GradientReport, finite_difference_check, forward_backward
from .module import Module
from .tensor import (
    NonFiniteError,
    Parameter,
    ShapeError,
    Tensor,
    as_tensor,
    get_dtype,
    no_grad,
    precision,
    set_dtype,
)

__all__ = [
    "GradientReport",
    "Module",
    "NonFiniteError",
    "Parameter",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "finite_difference_check",
    "forward_backward",
    "get_dtype",
    "no_grad",
    "ops",
    "precision",
    "set_dtype",
]
