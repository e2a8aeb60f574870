"""Weighted point-cloud normal estimation with contrastive pre-training."""

__version__ = "0.1.0"
