"""Multiscale vision-Mamba segmentation on a small numpy autodiff engine."""
from .errors import (ConfigError, ContractViolation, DataError, FormatError, IntegrityError,
                     PhantomSpecError, ShapeError)
from .model import ModelConfig, MsvMamba
from .tensor import Tensor, backward, no_grad, precision

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractViolation", "DataError", "FormatError", "IntegrityError",
    "ModelConfig", "MsvMamba", "PhantomSpecError", "ShapeError", "Tensor", "backward",
    "no_grad", "precision",
]
