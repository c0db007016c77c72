"""Pillar-based LiDAR ground segmentation with a depthwise-separable attention U-Net."""

__version__ = "0.1.0"
