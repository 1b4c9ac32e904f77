"""Numerical certification tools for blender-type Cantor sets of skew products."""

__version__ = "0.1.0"
