"""Log-cosine collaborative filtering from implicit feedback."""
__version__ = "0.1.0"
