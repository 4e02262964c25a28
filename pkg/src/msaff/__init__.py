"""Multimodal silhouette + skeleton gait recognition on a numpy autodiff core."""

__version__ = "0.1.0"
