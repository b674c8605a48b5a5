"""Ground-truth-free detection of contour errors on organ segmentations."""

__version__ = "0.1.0"
