"""Shared-memory parallel CNN training with controlled lock-free weight sharing."""

__version__ = "0.1.0"
