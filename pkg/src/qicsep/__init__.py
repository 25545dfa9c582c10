"""Numerical companion for classical-vs-quantum separations in sparse linear systems."""

__version__ = "0.1.0"
