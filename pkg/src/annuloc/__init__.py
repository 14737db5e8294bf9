"""Temporally consistent anatomical-landmark localization in sector video."""

__version__ = "0.1.0"
