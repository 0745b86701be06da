"""AGNet salient object detection on a small numpy autograd engine."""

from .model import AGNet, AblationConfig, ModelConfig, ModelOutput
from .tensor import Tensor, grad_check, no_grad

__version__ = "0.1.0"

__all__ = ["AGNet", "AblationConfig", "ModelConfig", "ModelOutput", "Tensor", "grad_check", "no_grad"]
