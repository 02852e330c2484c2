"""Explainable two-stream CNN pipeline for zebrafish swim-bout classification."""

__version__ = "0.1.0"
