"""Trust-region optimization with localized reduced models."""
__version__ = "0.1.0"
