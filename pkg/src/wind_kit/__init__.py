"""Generative weather toolkit: diffusion-forcing denoisers, DDIM sampling and
guided posterior sampling for inverse problems on a synthetic atmosphere."""

__version__ = "0.1.0"
