"""Numerical toolkit for the Einstein relation of diffusions in random environments."""

__version__ = "0.1.0"
