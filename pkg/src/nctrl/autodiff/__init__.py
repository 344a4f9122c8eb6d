from . import tape as ops
from .checkpoint import CheckpointError
from .mlp import Mlp, StackedMlp
from .tape import Node, ShapeError, Tape, gaussian_log_density, logsumexp

__all__ = [
    "CheckpointError",
    "Mlp",
    "Node",
    "ShapeError",
    "StackedMlp",
    "Tape",
    "gaussian_log_density",
    "logsumexp",
    "ops",
]
