"""Dual-branch conditioned diffusion for product background generation."""

__version__ = "0.1.0"
