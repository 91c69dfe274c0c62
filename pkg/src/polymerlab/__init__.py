"""Exact transfer-matrix engine and Monte Carlo verification suites for
directed polymers in random environment."""

__version__ = "0.1.0"
