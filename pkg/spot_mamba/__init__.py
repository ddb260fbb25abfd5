"""Spatio-temporal graph forecasting with selective state-space scans over graph walks and time."""

__version__ = "0.1.0"
