"""Cluster-specialized trajectory prediction experts with a learned router."""

__version__ = "0.1.0"
