"""Sparse multilingual sub-network discovery and analysis toolkit."""

__version__ = "0.1.0"
