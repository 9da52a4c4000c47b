"""Defensive distillation, saliency-map attacks and robustness metrics."""

__version__ = "0.1.0"
