"""Attention-gated residual double U-Net for binary medical image segmentation,
built on a small numpy autodiff engine."""

from .model import FULL_CONFIG, TOY_CONFIG, AttResDUNet, ModelConfig, build_model, count_params_flops
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "AttResDUNet",
    "FULL_CONFIG",
    "ModelConfig",
    "TOY_CONFIG",
    "Tensor",
    "build_model",
    "count_params_flops",
    "no_grad",
    "__version__",
]
