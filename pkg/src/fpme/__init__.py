"""Numerical laboratory for the weighted fractional porous medium equation."""

__version__ = "0.1.0"
