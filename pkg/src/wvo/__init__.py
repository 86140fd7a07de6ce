"""Weighted virtual observations for incremental Bayesian belief updating."""

__version__ = "0.1.0"
