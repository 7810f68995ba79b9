"""Stepwise model selection for sequence prediction via deep kernel learning."""

__version__ = "0.1.0"
