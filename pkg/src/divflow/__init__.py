"""Divergence-free enhancement and unwrapping of 3D velocity fields."""

__version__ = "0.1.0"
