"""Iterative pruning with self-distillation on small masked MLPs."""

__version__ = "0.1.0"
