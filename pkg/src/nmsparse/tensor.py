"""Dense 2-D float64 substrate.

A "matrix" throughout the package is a C-contiguous ``float64`` numpy array of
shape ``(rows, cols)``. Rows are tokens (or output units for weights) and
columns are channels, so ``matmul(X, W)`` computes ``X @ W.T`` like a linear
layer with weight ``W`` of shape ``(out, in)``.
"""

from __future__ import annotations

import numpy as np

__all__ = ["as_matrix", "matmul", "row_mean", "row_var", "make_rng"]


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Validate and convert ``data`` to a finite float64 2-D array."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must have rows >= 1 and cols >= 1, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def matmul(X, W) -> np.ndarray:
    """Linear-layer product ``X @ W.T`` for ``X`` (l, h) and ``W`` (o, h)."""
    X = as_matrix(X, "X")
    W = as_matrix(W, "W")
    if X.shape[1] != W.shape[1]:
        raise ValueError(f"matmul: X.cols != W.cols (X {X.shape}, W {W.shape})")
    return X @ W.T


def row_mean(X) -> np.ndarray:
    return as_matrix(X).mean(axis=1)


def row_var(X) -> np.ndarray:
    """Population variance of each row (divides by ``cols``)."""
    X = as_matrix(X)
    centered = X - X.mean(axis=1, keepdims=True)
    var = np.mean(centered * centered, axis=1)
    # the rounded mean of a constant row can differ from its entries
    var[X.max(axis=1) == X.min(axis=1)] = 0.0
    return var


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; its stream is fixed by numpy across platforms."""
    return np.random.Generator(np.random.PCG64(int(seed)))
