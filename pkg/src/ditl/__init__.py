"""Clinically guided multimodal training: Grad-CAM alignment, gradual masks, fusion."""
__version__ = "0.1.0"
