"""Deep-learning and elastic-alignment toolkit for time series classification."""

__version__ = "0.1.0"
