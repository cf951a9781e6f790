"""Desk-scale laboratory for bi-level re-weighting of generated training samples."""

__version__ = "0.1.0"
