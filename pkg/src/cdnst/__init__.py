"""Cross-domain novelty-seeking trait mining for sequential recommendation."""

__version__ = "0.1.0"
