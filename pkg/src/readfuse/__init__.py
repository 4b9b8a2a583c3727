"""Translation with noisy external target words: reading-fusion with global and local noise discriminators."""

__version__ = "0.1.0"
