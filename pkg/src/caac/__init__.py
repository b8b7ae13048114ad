"""Angle-coded attention retrieval of cloud optical thickness."""

__version__ = "0.1.0"
