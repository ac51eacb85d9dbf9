"""Rank-sum test-retest reliability for functional connectomes."""

__version__ = "0.1.0"
