"""High-resolution spatiotemporal event forecasting on an adaptive region graph."""

__version__ = "0.1.0"
