"""Attention-based feature aggregation and correlation tracking for video instance segmentation."""

__version__ = "0.1.0"
