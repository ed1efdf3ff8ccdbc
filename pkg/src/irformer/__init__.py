"""Transformer-based detector for small, dim infrared targets, built on a numpy autograd core."""

__version__ = "0.1.0"
