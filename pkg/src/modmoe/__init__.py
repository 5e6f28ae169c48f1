"""Modality-routed sparse mixture-of-experts on a toy multimodal LM."""

__version__ = "0.1.0"
