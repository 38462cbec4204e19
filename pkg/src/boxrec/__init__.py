"""Tag-aware recommendation with box embeddings over a user-item-tag graph."""

__version__ = "0.1.0"
