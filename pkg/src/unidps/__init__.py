"""unidps: desk-scale unified depth-aware panoptic segmentation.

Per-segment queries produce masks, classes and depth maps from one
forward pass; a latent middleware injects scene geometry into the
queries; bi-directional guidance losses couple the semantic and depth
feature paths; everything trains with hand-derived gradients verified by
finite differences.
"""

__version__ = "0.1.0"
