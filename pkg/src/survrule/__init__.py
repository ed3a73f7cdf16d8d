"""Optimal individualized treatment rules from discrete-time censored survival data."""

__version__ = "0.1.0"
