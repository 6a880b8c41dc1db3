"""Batch-normalized VAEs and comparator regularizers on a small numpy autodiff."""

__version__ = "0.1.0"
