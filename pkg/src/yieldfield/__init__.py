"""Yield-curve forecasting with dynamic factor trends and SPDE residual fields."""

__version__ = "0.1.0"
