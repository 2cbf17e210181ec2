"""Masked-siamese pre-training on a from-scratch float64 autodiff stack."""

__version__ = "0.1.0"
