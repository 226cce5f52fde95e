"""Discrete geometric homogenization of 2D divergence-form elliptic operators."""

__version__ = "0.1.0"
