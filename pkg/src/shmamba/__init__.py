"""Structured hyperbolic state-space model for audio-visual question answering."""

__version__ = "0.1.0"
