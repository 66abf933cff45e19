"""Discrete-time survival analysis with a masked transformer encoder."""

__version__ = "0.1.0"
