"""Robust multi-agent distribution steering."""

__version__ = "0.1.0"
