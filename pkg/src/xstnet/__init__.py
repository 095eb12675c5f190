"""Desk-scale bimodal speech/text transformer trained with progressive multi-task recipes."""

__version__ = "0.1.0"
