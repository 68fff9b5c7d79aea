"""Mask-classification segmentation toolkit with a temporal region classifier."""

__version__ = "0.1.0"
ARTIFACT_VERSION = 1
