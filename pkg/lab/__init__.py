"""Difficulty-aware GRPO anomaly lab."""

__version__ = "1.0.0"
