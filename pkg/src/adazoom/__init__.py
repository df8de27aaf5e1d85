"""Adaptive zoom-region generation for detection in large scenes."""

__version__ = "0.1.0"
