"""Depth and ego-motion toolkit for unrectified, lens-distorted video."""

__version__ = "0.1.0"
