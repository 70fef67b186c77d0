"""Lung-nodule malignancy prediction with text-aligned contrastive training."""

__version__ = "0.1.0"
