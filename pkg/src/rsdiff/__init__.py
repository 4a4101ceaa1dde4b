"""Simulation and verification tools for state-dependent regime-switching diffusions."""

__version__ = "0.1.0"
