"""Particle simulation and contraction diagnostics for distribution-dependent SDEs."""

__version__ = "0.1.0"
