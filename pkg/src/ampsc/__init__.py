"""Adaptive model predictive safety certification for uncertain linear systems."""

__version__ = "0.1.0"
