"""Prompt-anchored multi-view stereo for metric video depth."""

__version__ = "0.1.0"
