"""Instrumented tile-based differentiable Gaussian splatting at desk scale."""

__version__ = "0.1.0"
