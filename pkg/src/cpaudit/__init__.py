"""Offline privacy auditing of captive-portal and landing-page captures."""

__version__ = "0.1.0"
