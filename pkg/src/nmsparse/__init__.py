"""Post-training N:M and unstructured activation sparsity.

Scoring criteria, error-mitigation transforms, a compressed N:M storage
format with metadata-cost arithmetic, and a perplexity benchmark on a small
byte-level language model.
"""

from .masks import Mask, PatternSpec, Unstructured, apply_mask, make_mask, nm_mask, parse_pattern, unstructured_mask

__version__ = "0.1.0"

__all__ = [
    "Mask",
    "PatternSpec",
    "Unstructured",
    "apply_mask",
    "make_mask",
    "nm_mask",
    "parse_pattern",
    "unstructured_mask",
]
