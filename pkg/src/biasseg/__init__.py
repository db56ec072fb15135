"""biasseg: bias-aware prompt-conditioned segmentation workbench."""

__version__ = "0.1.0"
