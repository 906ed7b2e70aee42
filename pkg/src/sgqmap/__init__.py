"""Desk-scale vectorized map construction with scatter/gather instance queries."""

__version__ = "0.1.0"
