"""Retrieval-conditioned diffusion simulator for multi-stock return panels."""

__version__ = "0.1.0"
