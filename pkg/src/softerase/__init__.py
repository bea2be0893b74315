"""Erasure-based and soft-perturbation faithfulness metrics for token attributions."""

__version__ = "0.1.0"
