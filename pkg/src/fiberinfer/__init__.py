"""Simulation-based inference of multi-fiber diffusion kernel parameters."""

__version__ = "0.1.0"
