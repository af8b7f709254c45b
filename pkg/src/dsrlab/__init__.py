"""Desk-scale distant speech recognition laboratory."""

from dsrlab._backend import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
