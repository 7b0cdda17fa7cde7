"""Depth-guided Gaussian-splat scene inpainting."""

__version__ = "0.1.0"
