"""Hierarchical axial/coronal diffusion inpainting for 3D volumes."""

__version__ = "0.1.0"
