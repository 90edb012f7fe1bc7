"""Rank, validate and repair generated tax-calculator programs."""

__version__ = "0.1.0"
