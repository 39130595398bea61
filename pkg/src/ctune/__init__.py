"""Collective compiler-flag tuning toolkit."""

__version__ = "0.1.0"
