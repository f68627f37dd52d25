"""Sparse-view radiance fields guided by binary trait images."""
from .config import RunConfig
from .errors import TraitNeRFError
from .model import TraitNeRF

__all__ = ["RunConfig", "TraitNeRF", "TraitNeRFError"]
__version__ = "0.1.0"
