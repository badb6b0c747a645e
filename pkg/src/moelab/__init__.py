"""Mixture-of-experts sparsification lab: routing statistics, expert pruning,
top-k adaptation and analytical cost accounting on a small numpy transformer."""

__version__ = "0.1.0"
