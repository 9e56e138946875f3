"""Binary keep-masks: N:M semi-structured and exact-count unstructured.

N:M blocks run along rows, so every token keeps ``n`` of each ``m``
consecutive channels. All selection is by order statistics with ties going to
the lower (row-major) index, which keeps masks deterministic and makes the
unstructured sparsity level exact even when scores repeat.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .tensor import as_matrix

__all__ = [
    "PatternSpec",
    "Unstructured",
    "Pattern",
    "Mask",
    "parse_pattern",
    "nm_mask",
    "unstructured_mask",
    "make_mask",
    "apply_mask",
    "retained_score",
    "is_nm_structured",
    "keep_count",
]


@dataclass(frozen=True)
class PatternSpec:
    """Keep ``n`` of every ``m`` consecutive elements along a row."""

    n: int
    m: int

    def __post_init__(self):
        if not (isinstance(self.n, int) and isinstance(self.m, int)):
            raise TypeError(f"n and m must be integers, got {self.n!r}:{self.m!r}")
        if not 1 <= self.n <= self.m:
            raise ValueError(f"invalid N:M pattern {self.n}:{self.m} (need 1 <= n <= m)")

    @property
    def density(self) -> float:
        return self.n / self.m

    @property
    def is_dense(self) -> bool:
        return self.n == self.m

    def __str__(self):
        return f"{self.n}:{self.m}"


@dataclass(frozen=True)
class Unstructured:
    """Keep the globally highest-scoring ``1 - sparsity`` fraction of elements."""

    sparsity: float

    def __post_init__(self):
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError(f"unstructured sparsity must lie in [0, 1), got {self.sparsity}")

    @property
    def density(self) -> float:
        return 1.0 - self.sparsity

    @property
    def is_dense(self) -> bool:
        return self.sparsity == 0.0

    def __str__(self):
        return f"unstructured:{self.sparsity:g}"


Pattern = Union[PatternSpec, Unstructured]


def parse_pattern(text: str) -> Pattern:
    """Parse ``"N:M"`` or ``"unstructured:S"`` (S a fraction, or a percent like ``50%``)."""
    text = text.strip().lower()
    if text.startswith("unstructured"):
        _, _, level = text.partition(":")
        if not level:
            raise ValueError(f"missing sparsity level in {text!r}")
        level = level.strip()
        value = float(level[:-1]) / 100.0 if level.endswith("%") else float(level)
        return Unstructured(value)
    n, sep, m = text.partition(":")
    if not sep:
        raise ValueError(f"pattern must look like 'N:M' or 'unstructured:S', got {text!r}")
    return PatternSpec(int(n), int(m))


@dataclass(frozen=True, eq=False)
class Mask:
    bits: np.ndarray
    pattern: Pattern

    def __post_init__(self):
        self.bits.setflags(write=False)

    @property
    def shape(self):
        return self.bits.shape

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.bits if dtype is None else self.bits.astype(dtype)


def keep_count(total: int, sparsity: float) -> int:
    """round((1 - sparsity) * total), halves rounded up."""
    return int(math.floor((1.0 - sparsity) * total + 0.5))


def _as_bits(mask) -> np.ndarray:
    return mask.bits if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)


def nm_mask(scores, spec: PatternSpec) -> Mask:
    scores = as_matrix(scores, "scores")
    rows, cols = scores.shape
    if cols % spec.m:
        raise ValueError(f"cols={cols} is not divisible by block length m={spec.m}")
    blocks = scores.reshape(rows, cols // spec.m, spec.m)
    # stable sort on negated scores: equal scores keep ascending column order
    order = np.argsort(-blocks, axis=-1, kind="stable")[..., : spec.n]
    bits = np.zeros(blocks.shape, dtype=bool)
    np.put_along_axis(bits, order, True, axis=-1)
    return Mask(bits.reshape(rows, cols), spec)


def unstructured_mask(scores, sparsity: float) -> Mask:
    pattern = Unstructured(float(sparsity))
    scores = as_matrix(scores, "scores")
    flat = scores.ravel()
    k = keep_count(flat.size, pattern.sparsity)
    bits = np.zeros(flat.size, dtype=bool)
    bits[np.argsort(-flat, kind="stable")[:k]] = True
    return Mask(bits.reshape(scores.shape), pattern)


def make_mask(scores, pattern: Pattern) -> Mask:
    if isinstance(pattern, PatternSpec):
        return nm_mask(scores, pattern)
    if isinstance(pattern, Unstructured):
        return unstructured_mask(scores, pattern.sparsity)
    raise TypeError(f"unknown pattern {pattern!r}")


def apply_mask(X, mask) -> np.ndarray:
    X = as_matrix(X, "X")
    bits = _as_bits(mask)
    if bits.shape != X.shape:
        raise ValueError(f"mask shape {bits.shape} does not match X shape {X.shape}")
    return np.where(bits, X, 0.0)


def retained_score(scores, mask) -> float:
    scores = as_matrix(scores, "scores")
    bits = _as_bits(mask)
    if bits.shape != scores.shape:
        raise ValueError(f"mask shape {bits.shape} does not match scores shape {scores.shape}")
    return float(scores[bits].sum())


def is_nm_structured(mask, spec: PatternSpec) -> bool:
    bits = _as_bits(mask)
    if bits.ndim != 2 or bits.shape[1] % spec.m:
        return False
    counts = bits.reshape(bits.shape[0], -1, spec.m).sum(axis=-1)
    return bool(np.all(counts == spec.n))
