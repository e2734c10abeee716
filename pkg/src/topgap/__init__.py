"""Top-GAP: top-k pooled class maps with l1 sparsity, plus robustness and saliency diagnostics."""

__version__ = "0.1.0"
