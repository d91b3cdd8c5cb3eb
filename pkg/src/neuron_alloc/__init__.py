"""Language-specific neuron allocation for multilingual translation models."""
from __future__ import annotations

from neuron_alloc.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
