"""Weakly supervised multi-domain semantic parsing with policy distillation."""

__version__ = "0.1.0"
