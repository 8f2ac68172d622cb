"""Desk-scale lab for forgetting in domain-incremental segmentation."""

__version__ = "0.1.0"
