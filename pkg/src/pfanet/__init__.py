"""PFANet monocular depth estimation on a small numpy autodiff core."""
from .model import ModelConfig, PFANet, tiny_config
from .tensor import Tensor, backward, no_grad, precision

__all__ = ["ModelConfig", "PFANet", "Tensor", "backward", "no_grad", "precision", "tiny_config"]
__version__ = "0.1.0"
