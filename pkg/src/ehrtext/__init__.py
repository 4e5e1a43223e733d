"""Contrastive alignment of tabular health records with clinical notes."""

__version__ = "0.1.0"
