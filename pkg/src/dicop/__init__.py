"""Default-indicator copula credit model with consistent stochastic recovery."""

__version__ = "0.1.0"
