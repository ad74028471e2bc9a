"""Prefix/suffix/middle reordered codec language modeling on a synthetic codec."""

__version__ = "0.1.0"
