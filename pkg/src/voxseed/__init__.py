"""Semi-supervised volumetric segmentation with uncertainty-gated and
embedding nearest-neighbour pseudo-labels."""

__version__ = "0.1.0"
