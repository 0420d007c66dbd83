"""Serialization-free data passing between WebAssembly functions."""

__version__ = "0.1.0"
