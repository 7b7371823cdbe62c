"""Transportation mode detection from Wi-Fi sensor connection logs."""

__version__ = "0.1.0"
