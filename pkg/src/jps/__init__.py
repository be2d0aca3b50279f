"""Joint parameter selection for sparse fine-tuning under domain shift."""

__version__ = "0.1.0"
