"""Stable self-training for source-free domain adaptation in segmentation."""

__version__ = "0.1.0"
