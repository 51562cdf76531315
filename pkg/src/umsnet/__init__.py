"""Multi-sensor human activity recognition: lightweight residual feature
stacks, flatten-and-concatenate sensor fusion, and a class-token transformer
classifier, built on a small numpy autodiff engine."""

from .estimator import UMSNetClassifier
from .model import ModelConfig, SensorSpec, UMSNet, build_model
from .rng import Rng
from .tensor import Parameter, Tensor, backward, grad_check, no_grad

__all__ = [
    "ModelConfig",
    "Parameter",
    "Rng",
    "SensorSpec",
    "Tensor",
    "UMSNet",
    "UMSNetClassifier",
    "backward",
    "build_model",
    "grad_check",
    "no_grad",
]

__version__ = "0.1.0"
