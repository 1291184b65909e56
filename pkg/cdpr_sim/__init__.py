"""Failure identification and task recovery for a planar reconfigurable CDPR."""

__version__ = "0.1.0"
