"""Desk-scale simulator of hierarchical federated ViT training on masked patches."""

__version__ = "0.1.0"
