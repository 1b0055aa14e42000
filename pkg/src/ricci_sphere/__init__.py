"""Spectral time-tau Ricci iteration on the two-sphere."""

__version__ = "0.1.0"
