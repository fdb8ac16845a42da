"""Desk-scale two-stage (SFT then GRPO) training pipeline for instruction-following navigation."""

__version__ = "0.1.0"
