"""Collaborative multi-model eGFR forecasting with offline-testable backends."""

__version__ = "0.1.0"
