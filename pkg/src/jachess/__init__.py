"""Layer-wise Jacobian and Hessian smoothness regularization for small sequence classifiers."""

__version__ = "0.1.0"

from .autodiff import Graph, Tensor, backward, grad, vjp  # noqa: E402,F401
from .model import ModelConfig, forward, init_model, load_checkpoint, save_checkpoint  # noqa: E402,F401
