"""Continual pre-training experiments on synthetic streams, on plain numpy."""

__version__ = "0.1.0"
