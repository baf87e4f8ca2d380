"""Few-shot semantic relation prediction across heterogeneous graphs."""

__version__ = "0.1.0"
