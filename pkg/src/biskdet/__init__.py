"""Compact single-stage detector with skip-connected feature fusion, UAP robustness tooling and heatmaps."""

__version__ = "0.1.0"
