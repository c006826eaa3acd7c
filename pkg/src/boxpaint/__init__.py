"""Object detection by generating annotation images with a conditional diffusion model."""

__version__ = "0.1.0"
