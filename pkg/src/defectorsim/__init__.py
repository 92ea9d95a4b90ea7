"""Desk-scale toolkit for DNS-assisted traffic-correlation attacks on Tor."""

__version__ = "0.1.0"

UNMONITORED = 0
"""Label used for unmonitored traces and negative verdicts. Site ids start at 1."""
