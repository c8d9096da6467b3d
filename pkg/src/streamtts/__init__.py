"""Streaming text-to-speech toy system: phoneme, temporal and depth transformers."""
from .errors import StreamTTSError

__version__ = "0.1.0"
__all__ = ["StreamTTSError", "__version__"]
