"""
Tensor engine: dense float32 tensors, primitives and a reverse-mode tape
"""

from services.engine.tensor import (
    Function,
    Tape,
    Tensor,
    as_tensor,
    backward,
    check_finite,
    compute_dtype,
    no_grad,
)
from services.engine.rng import Rng

__all__ = [
    "Function",
    "Rng",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "check_finite",
    "compute_dtype",
    "no_grad",
]
