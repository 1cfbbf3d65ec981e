"""Attention-guided, mask-gated adversarial translation on procedural toy scenes."""

__version__ = "0.1.0"
