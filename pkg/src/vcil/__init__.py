"""Desk-scale video class-incremental learning with spatial/temporal adapters."""

__version__ = "0.1.0"
