"""Desk-scale dual-transformer trainer for cross-lingual sentence representations."""

from duosent.errors import DivergenceError, DuosentError, InputError
from duosent.tensor import Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "DuosentError", "InputError", "DivergenceError", "__version__"]
