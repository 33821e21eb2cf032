"""Joint key-value pair extraction with token-pair relation matrices."""

__version__ = "0.1.0"
