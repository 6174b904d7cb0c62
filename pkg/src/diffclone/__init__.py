"""Diffusion behavior cloning toolkit with baselines and a toy pouring simulator."""

__version__ = "0.1.0"
