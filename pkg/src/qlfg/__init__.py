"""Desk-scale quantized low-rank fine-tuning pipeline."""

__version__ = "0.1.0"
