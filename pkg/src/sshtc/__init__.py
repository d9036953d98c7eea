"""Self-supervised hierarchical task clustering for multi-source few-shot text classification."""

__version__ = "0.1.0"
