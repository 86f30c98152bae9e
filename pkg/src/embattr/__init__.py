"""Task-free attribution maps and scores for learned embeddings."""

__version__ = "0.1.0"
