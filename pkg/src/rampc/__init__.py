"""Reach-avoid certificate synthesis and sampled-data MPC toolkit."""

from .polynomial import Polynomial, BasisSet

__all__ = ["Polynomial", "BasisSet"]
__version__ = "0.1.0"
