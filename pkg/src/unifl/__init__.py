"""Unified facial-landmark numerics toolkit."""

__version__ = "0.1.0"
