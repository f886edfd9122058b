"""revoicer: noisy-reverberant corpus synthesis, enhancement, and toy voice conversion."""

__version__ = "0.1.0"
