"""Vessel-aware selective-scan classification of OCTA-like images, at desk scale."""

from .errors import VampireError

__version__ = "0.1.0"
__all__ = ["VampireError", "__version__"]
