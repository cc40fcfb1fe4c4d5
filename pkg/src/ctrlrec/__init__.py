"""Objective-conditioned sequential recommendation toolkit."""

__version__ = "0.1.0"
