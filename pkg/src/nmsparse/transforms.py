"""Error-mitigation transforms wrapped around an activation-masked linear layer.

Every forward takes the layer input ``X`` (tokens x channels), the weight
``W`` (out x channels), a criterion name and a pattern, and returns the layer
output. With a mask that keeps everything each one reduces to ``X @ W.T``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .criteria import AmberWeightStats, amber_weight_stats, score
from .masks import Pattern, make_mask
from .tensor import as_matrix, matmul, row_mean, row_var

log = logging.getLogger(__name__)

__all__ = [
    "TRANSFORMS",
    "ShiftVector",
    "LowRankFactors",
    "LearnableParams",
    "masked",
    "forward_baseline",
    "forward_dpts",
    "calibrate_spts",
    "forward_spts",
    "var_scale",
    "forward_var",
    "pcs_scale",
    "forward_pcs",
    "forward_lpts",
    "lpts_loss_and_grad",
    "fit_lpts",
    "jacobi_svd",
    "rsparse_factors",
    "forward_rsparse",
]

TRANSFORMS = (
    "none",
    "dpts",
    "spts",
    "lpts",
    "var",
    "var+lpts",
    "pcs",
    "rsparse",
    "ls+lpts",
    "ls+lpts+var",
)


@dataclass(frozen=True)
class ShiftVector:
    values: np.ndarray
    kind: str  # "dynamic" (one per token), "static" or "learnable" (one per channel)

    def __post_init__(self):
        if self.kind not in ("dynamic", "static", "learnable"):
            raise ValueError(f"unknown shift kind {self.kind!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("shift vector contains NaN or Inf")


@dataclass(frozen=True)
class LowRankFactors:
    A: np.ndarray  # (out, r)
    B: np.ndarray  # (r, in)

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def product(self) -> np.ndarray:
        return self.A @ self.B


@dataclass
class LearnableParams:
    eta: ShiftVector
    diag_scale: np.ndarray | None = None
    loss_trace: list[float] = field(default_factory=list)
    status: str = "ok"

    @property
    def initial_loss(self) -> float:
        return self.loss_trace[0]

    @property
    def best_loss(self) -> float:
        return self.loss_trace[-1]


def masked(Z, W, criterion: str, pattern: Pattern, stats: AmberWeightStats | None = None):
    """Mask ``Z`` by ``criterion`` scores; returns ``(Z * M, M)``."""
    mask = make_mask(score(criterion, Z, W, stats), pattern)
    return np.where(mask.bits, Z, 0.0), mask.bits


def forward_baseline(X, W, criterion: str, pattern: Pattern, stats=None):
    X = as_matrix(X, "X")
    Xm, _ = masked(X, W, criterion, pattern, stats)
    return matmul(Xm, W)


def forward_dpts(X, W, criterion: str, pattern: Pattern, stats=None):
    """Centre each token on its own mean, mask the centred values, add the mean back."""
    X = as_matrix(X, "X")
    eta = row_mean(X)[:, None]
    Zm, _ = masked(X - eta, W, criterion, pattern, stats)
    return matmul(Zm + eta, W)


def calibrate_spts(batches: Sequence) -> ShiftVector:
    """Pooled per-channel mean over all calibration tokens."""
    batches = [as_matrix(b, "calibration batch") for b in batches]
    if not batches:
        raise ValueError("S-PTS calibration needs at least one batch")
    dims = {b.shape[1] for b in batches}
    if len(dims) != 1:
        raise ValueError(f"calibration batches disagree on hidden dim: {sorted(dims)}")
    total = sum(b.sum(axis=0) for b in batches)
    count = sum(b.shape[0] for b in batches)
    return ShiftVector(total / count, "static")


def _shift_values(eta, cols: int) -> np.ndarray:
    values = eta.values if isinstance(eta, ShiftVector) else np.asarray(eta, dtype=np.float64)
    if values.shape != (cols,):
        raise ValueError(f"shift has shape {values.shape}, layer input has {cols} channels")
    return values


def forward_spts(X, W, eta, criterion: str, pattern: Pattern, stats=None):
    X = as_matrix(X, "X")
    if isinstance(eta, ShiftVector) and eta.kind == "dynamic":
        raise ValueError("forward_spts needs a per-channel (static or learnable) shift")
    values = _shift_values(eta, X.shape[1])[None, :]
    Zm, _ = masked(X - values, W, criterion, pattern, stats)
    return matmul(Zm + values, W)


def var_scale(X, Xm) -> np.ndarray:
    """Per-token factor restoring the original row variance; 1 where the masked row is flat."""
    v_orig = row_var(X)
    v_mask = row_var(Xm)
    nu = np.ones_like(v_orig)
    live = v_mask > 0
    nu[live] = np.sqrt(v_orig[live] / v_mask[live])
    return nu


def forward_var(X, W, criterion: str, pattern: Pattern, stats=None):
    X = as_matrix(X, "X")
    Xm, _ = masked(X, W, criterion, pattern, stats)
    return matmul(var_scale(X, Xm)[:, None] * Xm, W)


def pcs_scale(X, W) -> np.ndarray:
    """Smoothing factor sqrt(max|X_:,j| / max|W_:,j|); degenerate channels get 1."""
    X = as_matrix(X, "X")
    W = as_matrix(W, "W")
    x_max = np.max(np.abs(X), axis=0)
    w_max = np.max(np.abs(W), axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.sqrt(x_max / w_max)
    s[~np.isfinite(s) | (s == 0)] = 1.0
    return s


def forward_pcs(X, W, criterion: str, pattern: Pattern, stats=None):
    X = as_matrix(X, "X")
    W = as_matrix(W, "W")
    if X.shape[1] != W.shape[1]:
        raise ValueError(f"pcs: X.cols != W.cols (X {X.shape}, W {W.shape})")
    s = pcs_scale(X, W)
    Xm, _ = masked(X / s, W, criterion, pattern, stats)
    return Xm @ (W * s).T


def forward_lpts(
    X,
    W,
    eta,
    criterion: str,
    pattern: Pattern,
    diag_scale=None,
    with_var: bool = False,
    stats=None,
):
    """Learned shift (and optional diagonal scale) around the mask.

    ``Z = X * d - eta`` is masked (and VAR-rescaled when ``with_var``), the
    shift is added back and the scale undone on the weight side:
    ``((nu * (Z * M)) + eta) diag(d)^-1 W^T``.
    """
    X = as_matrix(X, "X")
    h = X.shape[1]
    eta_v = _shift_values(eta, h)
    d = np.ones(h) if diag_scale is None else np.asarray(diag_scale, dtype=np.float64)
    Z = X * d - eta_v
    Zm, _ = masked(Z, W, criterion, pattern, stats)
    if with_var:
        Zm = var_scale(Z, Zm)[:, None] * Zm
    return matmul((Zm + eta_v) / d, W)


def lpts_loss_and_grad(batches, W, eta, criterion, pattern, diag_scale=None, with_var=False, stats=None):
    """Mean squared output error against the dense layer and its gradient.

    The mask and the VAR factor are held fixed at the current parameters
    (straight-through), so the objective is a smooth function of ``eta`` and
    ``diag_scale`` for the gradient computation.
    """
    W = as_matrix(W, "W")
    h = W.shape[1]
    d = np.ones(h) if diag_scale is None else diag_scale
    count = sum(as_matrix(X).shape[0] for X in batches) * W.shape[0]
    loss = 0.0
    g_eta = np.zeros(h)
    g_d = np.zeros(h)
    for X in batches:
        X = as_matrix(X, "X")
        Z = X * d - eta
        Zm, bits = masked(Z, W, criterion, pattern, stats)
        nu = var_scale(Z, Zm) if with_var else np.ones(X.shape[0])
        P = nu[:, None] * Zm + eta
        E = (P / d) @ W.T - X @ W.T
        loss += float(np.sum(E * E))
        EW = (2.0 / count) * (E @ W)
        G_P = EW / d
        kept = nu[:, None] * bits
        g_eta += np.sum(G_P * (1.0 - kept), axis=0)
        if diag_scale is not None:
            g_d += np.sum(G_P * kept * X, axis=0) - np.sum(EW * P, axis=0) / (d * d)
    return loss / count, g_eta, g_d


def fit_lpts(
    layer_inputs: Sequence,
    W,
    criterion: str,
    pattern: Pattern,
    steps: int = 200,
    lr: float = 1e-2,
    with_ls: bool = False,
    with_var: bool = False,
    stats: AmberWeightStats | None = None,
    betas=(0.9, 0.999),
) -> LearnableParams:
    """Fit a per-channel shift (and LS diagonal scale) by Adam on layer-output MSE.

    Returns the best iterate seen. ``loss_trace[t]`` is the best loss after
    ``t`` updates, starting from the loss at ``eta = 0``, ``d = 1``.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    batches = [as_matrix(X, "calibration batch") for X in layer_inputs]
    if not batches:
        raise ValueError("fit_lpts needs at least one calibration batch")
    W = as_matrix(W, "W")
    if criterion == "amber" and stats is None:
        stats = amber_weight_stats(W)
    h = W.shape[1]

    theta = np.concatenate([np.zeros(h), np.ones(h)]) if with_ls else np.zeros(h)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2 = betas
    best_theta, best_loss = theta.copy(), np.inf
    trace: list[float] = []
    status = "ok"

    def unpack(t):
        return (t[:h], t[h:]) if with_ls else (t, None)

    for step in range(steps + 1):
        eta, d = unpack(theta)
        with np.errstate(over="ignore", invalid="ignore"):
            loss, g_eta, g_d = lpts_loss_and_grad(batches, W, eta, criterion, pattern, d, with_var, stats)
        if not np.isfinite(loss):
            status = "diverged"
            log.warning("fit_lpts diverged at step %d; keeping best finite iterate", step)
            break
        if loss < best_loss:
            best_loss, best_theta = loss, theta.copy()
        trace.append(best_loss)
        if step == steps:
            break
        grad = np.concatenate([g_eta, g_d]) if with_ls else g_eta
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        m_hat = m / (1 - b1 ** (step + 1))
        v_hat = v / (1 - b2 ** (step + 1))
        theta = theta - lr * m_hat / (np.sqrt(v_hat) + 1e-12)
        if with_ls:
            theta[h:] = np.maximum(theta[h:], 1e-6)

    eta, d = unpack(best_theta)
    return LearnableParams(
        eta=ShiftVector(eta.copy(), "learnable"),
        diag_scale=None if d is None else d.copy(),
        loss_trace=trace,
        status=status,
    )


def _round_robin(n: int):
    """Rounds of disjoint index pairs covering every pair once (circle method)."""
    players = list(range(n + (n % 2)))
    size = len(players)
    for _ in range(size - 1):
        pairs = [(players[i], players[size - 1 - i]) for i in range(size // 2)]
        yield [(p, q) if p < q else (q, p) for p, q in pairs if p < n and q < n]
        players = [players[0], players[-1], *players[1:-1]]


def jacobi_svd(M, tol: float = 1e-15, max_sweeps: int = 100):
    """Thin SVD ``M = U @ diag(S) @ Vt`` by one-sided (Hestenes) Jacobi rotations.

    Works on the side with fewer columns; pairs of columns are orthogonalised
    in round-robin order so each round is a batch of disjoint rotations.
    Singular values are returned in descending order.
    """
    M = as_matrix(M, "M")
    if M.shape[0] < M.shape[1]:
        U, S, Vt = jacobi_svd(M.T, tol, max_sweeps)
        return Vt.T, S, U.T
    G = M.copy()
    n = G.shape[1]
    V = np.eye(n)
    rounds = [np.array(r, dtype=np.intp).reshape(-1, 2) for r in _round_robin(n)]
    for _ in range(max_sweeps):
        rotated = False
        for pairs in rounds:
            if not len(pairs):
                continue
            p, q = pairs[:, 0], pairs[:, 1]
            Gp, Gq = G[:, p], G[:, q]
            alpha = np.sum(Gp * Gp, axis=0)
            beta = np.sum(Gq * Gq, axis=0)
            gamma = np.sum(Gp * Gq, axis=0)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not np.any(active):
                continue
            rotated = True
            with np.errstate(divide="ignore", invalid="ignore"):
                zeta = np.where(active, (beta - alpha) / (2.0 * gamma), 0.0)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = np.where(active, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(active, c * t, 0.0)
            G[:, p], G[:, q] = c * Gp - s * Gq, s * Gp + c * Gq
            Vp, Vq = V[:, p], V[:, q]
            V[:, p], V[:, q] = c * Vp - s * Vq, s * Vp + c * Vq
        if not rotated:
            break
    else:
        log.warning("jacobi_svd: no convergence after %d sweeps", max_sweeps)
    S = np.sqrt(np.sum(G * G, axis=0))
    order = np.argsort(-S, kind="stable")
    S, G, V = S[order], G[:, order], V[:, order]
    U = np.zeros_like(G)
    nz = S > 0
    U[:, nz] = G[:, nz] / S[nz]
    return U, S, V.T


def rsparse_factors(W, r: int) -> LowRankFactors:
    """Rank-``r`` truncated SVD of ``W`` as ``A = U_r diag(S_r)``, ``B = V_r^T``."""
    W = as_matrix(W, "W")
    if not 1 <= r <= min(W.shape):
        raise ValueError(f"rank r={r} out of range [1, {min(W.shape)}] for W of shape {W.shape}")
    U, S, Vt = jacobi_svd(W)
    return LowRankFactors(U[:, :r] * S[:r], Vt[:r].copy())


def forward_rsparse(X, W, factors: LowRankFactors, criterion: str, pattern: Pattern, stats=None):
    """Sparse path through ``W`` plus the masked-out residual through ``A B``."""
    X = as_matrix(X, "X")
    W = as_matrix(W, "W")
    if factors.A.shape[0] != W.shape[0] or factors.B.shape[1] != W.shape[1]:
        raise ValueError(
            f"low-rank factors {factors.A.shape} x {factors.B.shape} do not match W {W.shape}"
        )
    Xm, _ = masked(X, W, criterion, pattern, stats)
    residual = X - Xm
    return matmul(Xm, W) + (residual @ factors.B.T) @ factors.A.T
