"""Data-driven self-calibrating bundle adjustment for projective X-ray imagers."""

__version__ = "0.1.0"
