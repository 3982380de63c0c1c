"""Attention-gated cross-modality image translation and domain adaptation."""

__version__ = "0.1.0"
