"""Synthetic-data augmentation pipeline for prostate whole-gland segmentation."""

__version__ = "0.1.0"
