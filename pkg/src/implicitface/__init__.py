"""Desk-scale single-view human reconstruction with a morphable face prior."""

__version__ = "0.1.0"
