"""Desk-scale lab for CLIP-targeted knowledge distillation on a synthetic VL world."""

__version__ = "0.1.0"
