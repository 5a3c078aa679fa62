"""Zonal prostate segmentation with squeeze-and-excitation U-Nets."""

__version__ = "0.1.0"
