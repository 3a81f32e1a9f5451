"""Hierarchical multi-label classification toolkit.

Taxonomy-driven classification with per-sibling-group softmax heads,
level-isolated hierarchical losses, from-scratch trainable models,
hierarchical precision/recall/F1, per-slide vote aggregation, a synthetic
data generator, and Grad-CAM attribution, all behind one CLI.
"""

__version__ = "0.1.0"

from hiercls.taxonomy import Taxonomy, load_default_taxonomy, parse_taxonomy

__all__ = ["Taxonomy", "load_default_taxonomy", "parse_taxonomy", "__version__"]
