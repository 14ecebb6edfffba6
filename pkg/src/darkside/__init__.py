"""Night-time augmentation for illumination-robust image retrieval."""

__version__ = "0.1.0"
