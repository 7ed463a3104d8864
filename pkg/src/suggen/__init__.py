"""Desk-scale generative query suggestion engine."""

__version__ = "0.1.0"
