"""Desk-scale TBI lesion segmentation pipeline."""

__version__ = "0.1.0"
