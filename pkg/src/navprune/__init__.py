"""Latency-aware structured pruning for a toy segmentation transformer,
plus the sidewalk-navigation decision pipeline built on top of it."""

__version__ = "0.1.0"
