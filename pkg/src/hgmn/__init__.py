"""Heterogeneous graph learning with selective state-space scans."""
__version__ = "0.1.0"
