"""Element importance scores used to build pruning masks.

``act``    |X|
``wt``     |W| (weight pruning)
``clact``  |X_ij| / ||X_i,:|| * ||X_:,j||  (token-normalised magnitude times channel norm)
``amber``  |X_ij| * ||W_hat_:,j||  with W_hat standardised by outlier-clipped statistics
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import as_matrix

__all__ = [
    "CRITERIA",
    "AmberWeightStats",
    "amber_weight_stats",
    "score_act",
    "score_wt",
    "score_clact",
    "score_amber",
    "score",
]

CRITERIA = ("act", "wt", "clact", "amber")

AMBER_LOW_Q = 0.005
AMBER_HIGH_Q = 0.995


def score_act(X) -> np.ndarray:
    return np.abs(as_matrix(X, "X"))


def score_wt(W) -> np.ndarray:
    return np.abs(as_matrix(W, "W"))


def score_clact(X) -> np.ndarray:
    """Cosine-loss activation score.

    Rows are tokens, columns channels. A token whose row norm is zero gets
    all-zero scores.
    """
    X = as_matrix(X, "X")
    absx = np.abs(X)
    row_norm = np.sqrt(np.sum(X * X, axis=1, keepdims=True))
    col_norm = np.sqrt(np.sum(X * X, axis=0, keepdims=True))
    safe = np.where(row_norm > 0, row_norm, 1.0)
    return np.where(row_norm > 0, absx / safe, 0.0) * col_norm


@dataclass(frozen=True)
class AmberWeightStats:
    clipped_mean: float
    clipped_std: float
    channel_norms: np.ndarray
    fallback: bool = False


def amber_weight_stats(W) -> AmberWeightStats:
    """Per-input-channel norms of the standardised weight matrix.

    Statistics come only from weights inside the [0.5, 99.5] percentile band
    (linear-interpolation quantiles over all entries); every weight, clipped
    or not, is then standardised with them. Zero clipped variance falls back
    to raw column norms.
    """
    W = as_matrix(W, "W")
    flat = W.ravel()
    lo, hi = np.quantile(flat, [AMBER_LOW_Q, AMBER_HIGH_Q])
    kept = flat[(flat >= lo) & (flat <= hi)]
    mean = float(kept.mean())
    std = float(np.sqrt(np.mean((kept - mean) ** 2)))
    if std == 0.0:
        norms = np.sqrt(np.sum(W * W, axis=0))
        return AmberWeightStats(mean, std, norms, fallback=True)
    W_hat = (W - mean) / std
    return AmberWeightStats(mean, std, np.sqrt(np.sum(W_hat * W_hat, axis=0)))


def score_amber(X, W=None, stats: AmberWeightStats | None = None) -> np.ndarray:
    X = as_matrix(X, "X")
    if stats is None:
        if W is None:
            raise ValueError("amber scoring needs the layer weight W or precomputed stats")
        W = as_matrix(W, "W")
        if W.shape[1] != X.shape[1]:
            raise ValueError(f"amber: X.cols != W.cols (X {X.shape}, W {W.shape})")
        stats = amber_weight_stats(W)
    elif stats.channel_norms.shape[0] != X.shape[1]:
        raise ValueError(
            f"amber: stats cover {stats.channel_norms.shape[0]} channels, X has {X.shape[1]}"
        )
    return np.abs(X) * stats.channel_norms[None, :]


def score(name: str, X, W=None, stats: AmberWeightStats | None = None) -> np.ndarray:
    """Dispatch an activation criterion by name (``wt`` scores ``X`` as weights)."""
    if name == "act":
        return score_act(X)
    if name == "clact":
        return score_clact(X)
    if name == "amber":
        return score_amber(X, W, stats)
    if name == "wt":
        return score_wt(X)
    raise ValueError(f"unknown criterion {name!r}; expected one of {', '.join(CRITERIA)}")
