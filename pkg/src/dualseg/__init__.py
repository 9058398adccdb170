"""Dual-EMA-teacher semi-supervised segmentation on synthetic weather scenes."""

__version__ = "0.1.0"
