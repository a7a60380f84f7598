"""Label-guided auxiliary training for a desk-scale point-cloud detector."""

__version__ = "0.1.0"
