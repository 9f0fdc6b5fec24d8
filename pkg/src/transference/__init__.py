"""Two-encoder transformer translation pipeline."""

__version__ = "0.1.0"
