"""Desk-scale semi-supervised semantic segmentation with pseudo-label error localization."""

__version__ = "0.1.0"
