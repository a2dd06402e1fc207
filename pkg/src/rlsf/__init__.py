"""Preference learning from statistical A/B, AN and ANT test outcomes."""

__version__ = "0.1.0"
