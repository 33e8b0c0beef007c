"""Desk-scale laboratory for topological failure in point-cloud conditioned diffusion."""

__version__ = "0.1.0"
