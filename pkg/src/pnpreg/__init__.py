"""Plug-and-play deformable image registration with learned field denoisers."""

__version__ = "0.1.0"
