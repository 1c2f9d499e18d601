"""Exposure-completing HDR video rendering from alternating-exposure LDR video."""

__version__ = "0.1.0"
