"""Curation and evaluation of multi-structure CT label maps."""

__version__ = "0.1.0"
