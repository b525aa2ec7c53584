"""Emulated service-function chains of split neural sub-models over SRv6."""

__version__ = "0.1.0"
