"""Membership-inference evaluation with activation-matching interrogation."""

__version__ = "0.1.0"
