"""Speculative MTE tag leakage simulator."""

__version__ = "0.1.0"
