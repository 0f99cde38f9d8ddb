from .core import GraphConsumedError, Tensor, as_tensor, backward, grad_enabled, no_grad
from .optim import NonFiniteGradientError, OptimConfig, ParamSet, clip_and_step, clip_gradients
from .checkpoint import CheckpointError, load_tensors, save_tensors
from . import ops

__all__ = [
    "Tensor", "as_tensor", "backward", "no_grad", "grad_enabled", "GraphConsumedError",
    "OptimConfig", "ParamSet", "clip_and_step", "clip_gradients", "NonFiniteGradientError",
    "save_tensors", "load_tensors", "CheckpointError", "ops",
]
