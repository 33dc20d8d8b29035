"""Hybrid classical-quantum Markovian dynamics: simulation and positivity certificates."""
__version__ = "0.1.0"
