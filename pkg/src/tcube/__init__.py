"""Time-first, space-later land classification of satellite image time series."""

__version__ = "0.1.0"
