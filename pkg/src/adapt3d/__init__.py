"""Desk-scale mean-teacher domain adaptation for 3D point-cloud detection."""

__version__ = "0.1.0"
