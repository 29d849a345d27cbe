"""Rendered-to-real image translation with diffusion: domain knowledge injection and
texture-preserving attention control."""

__version__ = "0.1.0"
