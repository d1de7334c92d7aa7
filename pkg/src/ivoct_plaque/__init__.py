"""Plaque classification from IVOCT B-scans: scan conversion, augmentation,
CNN training with optional ImageNet initialization, and evaluation."""

__version__ = "0.1.0"
