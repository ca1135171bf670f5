"""Simulation and spectral analysis of sparse symmetric random matrices."""

__version__ = "0.1.0"
