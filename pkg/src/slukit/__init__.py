"""Desk-scale end-to-end speech intent classification and slot filling."""

__version__ = "0.1.0"
