"""Long-tailed multi-label chest X-ray training and evaluation."""

__version__ = "0.1.0"
