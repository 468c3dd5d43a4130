"""Consumption-resilience analytics on card-transaction streams."""
__version__ = "0.1.0"
