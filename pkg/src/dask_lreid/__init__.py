"""Lifelong person re-identification with distribution rehearsal, at toy scale."""

__version__ = "0.1.0"
