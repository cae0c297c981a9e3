"""Budgeted pixel-level active domain adaptation with multi-level contrastive units."""

__version__ = "0.1.0"
