"""Plenoptic camera calibration with blur-aware features."""

__version__ = "0.1.0"
