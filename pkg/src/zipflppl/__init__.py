"""Zipf-factor augmented LPPL bubble calibration."""

__version__ = "0.1.0"
