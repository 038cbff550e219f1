"""Noise-resilient spatiotemporal forecasting with mode decomposition and 3D attention."""

__version__ = "0.1.0"
