"""Minimal dense tensor library with reverse-mode autodiff."""

from . import ops
from .core import GraphError, Tensor, as_tensor, backward, grad_enabled, no_grad
from .gradcheck import check_gradients, numerical_grad, relative_error
from .vector import arg_topk, entropy, softmax

__all__ = [
    "GraphError",
    "Tensor",
    "arg_topk",
    "as_tensor",
    "backward",
    "check_gradients",
    "entropy",
    "grad_enabled",
    "no_grad",
    "numerical_grad",
    "ops",
    "relative_error",
    "softmax",
]
