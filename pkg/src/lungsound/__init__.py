"""Respiratory-sound classification: audio standardization, dual-branch features,
a CNN-BiLSTM-attention fusion classifier, training, evaluation and attribution."""

from .model import CLASSES, VARIANTS

__all__ = ["CLASSES", "VARIANTS"]
__version__ = "0.1.0"
