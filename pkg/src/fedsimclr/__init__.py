"""Federated SimCLR with user verification, semi-supervised bounds and an MI oracle."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
