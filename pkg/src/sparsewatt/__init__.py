"""Distributed sparse linear solvers with per-device energy accounting."""

from .errors import SparseWattError

__version__ = "0.1.0"

__all__ = ["SparseWattError", "__version__"]
