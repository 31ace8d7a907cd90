"""Patch embedding with density estimation and location prediction for unsupervised anomaly localization."""

__version__ = "0.1.0"
