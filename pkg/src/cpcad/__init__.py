"""Consistency-denoiser toolkit for 3D point cloud anomaly detection."""

__version__ = "0.1.0"
