"""Gaussian-state simulation of QND-squeezed atomic clocks and clock networks."""

__version__ = "0.1.0"
