"""KV inversion for pose edits on a toy text-conditioned diffusion model."""

__version__ = "0.1.0"
