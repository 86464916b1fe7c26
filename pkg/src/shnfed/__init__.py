"""Sheaf-hypernetwork personalized federated learning at desk scale."""

__version__ = "0.1.0"
