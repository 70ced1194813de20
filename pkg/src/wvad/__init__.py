"""Weakly-supervised video anomaly detection with contrastive snippet mining."""

__version__ = "0.1.0"
