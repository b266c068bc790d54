"""Robust Q-learning for two-stage treatment strategies with post-selection inference."""

__version__ = "0.1.0"
