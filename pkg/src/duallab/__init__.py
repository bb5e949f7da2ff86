"""Dual self-rewards for a unified text/image model on a 3x3 symbolic grid world."""

__version__ = "0.1.0"
