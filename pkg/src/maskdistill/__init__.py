"""Masked discrete diffusion LMs, discriminator-guided distillation, and exact oracles."""

__version__ = "0.1.0"
