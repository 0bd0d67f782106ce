from . import ops
from .checkpoint import CheckpointError
from .ops import EmptyDimError, EmptyGridError
from .tensor import Graph, RankError, ShapeError, Tensor, as_tensor, backward, grad_enabled, no_grad

__all__ = [
    "CheckpointError",
    "EmptyDimError",
    "EmptyGridError",
    "Graph",
    "RankError",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "grad_enabled",
    "no_grad",
    "ops",
]
