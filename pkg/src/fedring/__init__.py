"""Decentralized ring federation with synthetic replay buffers."""

__version__ = "0.1.0"
