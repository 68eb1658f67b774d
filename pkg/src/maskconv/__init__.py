"""Masked-diffusion token conversion with source-token reuse on synthetic paired sequences."""

__version__ = "0.1.0"
