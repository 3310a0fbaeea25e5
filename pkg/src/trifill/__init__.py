"""Tri-branch guided inpainting on a numpy reverse-mode tensor engine."""

__version__ = "0.1.0"
