"""Multi-hypothesis depth decoding for unsupervised 3D pose estimation."""

__version__ = "0.1.0"
