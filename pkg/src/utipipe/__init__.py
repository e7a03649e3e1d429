"""Multimodal (audio + ultrasound) analysis of child speech-therapy sessions."""

__version__ = "0.1.0"
