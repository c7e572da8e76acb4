"""Unsupervised cardiac motion tracking with fast online adaptation."""

from foal.tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad"]
__version__ = "0.1.0"
