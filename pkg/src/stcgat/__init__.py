"""Spatio-temporal graph forecasting on a small numpy autodiff substrate."""

__version__ = "0.1.0"
