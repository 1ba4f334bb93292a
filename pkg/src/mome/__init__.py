"""Text-guided mixture of multi-scale decoder experts for volumetric
segmentation under partial labels, with a synthetic multi-dataset harness."""

__version__ = "0.1.0"
