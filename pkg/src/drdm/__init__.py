"""Few-shot fine-grained classification with diffusion augmentation and reference classes."""

__version__ = "0.1.0"
