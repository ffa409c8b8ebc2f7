"""Long-tail classification with class-balanced re-sampling and
context-shift augmentation."""

__version__ = "0.1.0"
