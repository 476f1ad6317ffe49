"""Invertible circulant-diagonal linear layers and a small exact-likelihood flow."""

__version__ = "0.1.0"
