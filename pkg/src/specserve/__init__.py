"""Desk-scale speculative-decoding serving laboratory."""

__version__ = "0.1.0"
