"""Personalised federated social event detection with dual aggregation."""

__version__ = "0.1.0"
