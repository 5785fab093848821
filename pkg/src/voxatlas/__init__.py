"""Atlas-guided adversarial volumetric segmentation."""

__version__ = "0.1.0"
