"""Bit-flip fault injection, localization and recovery for small transformers."""

__version__ = "0.1.0"
