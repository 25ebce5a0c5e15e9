"""Coordinated guidance and control for multi-parafoil precision landing."""

__version__ = "0.1.0"
