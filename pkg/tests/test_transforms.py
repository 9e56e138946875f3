import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmsparse import transforms as T
from nmsparse.criteria import score_act
from nmsparse.masks import PatternSpec, Unstructured, apply_mask, nm_mask
from nmsparse.tensor import row_var

from conftest import naive_matmul

DENSE = PatternSpec(4, 4)
P24 = PatternSpec(2, 4)


def lpts_case(seed=0, h=8, tokens=16):
    """Activations mu + e where each e row has exactly 2 nonzeros per 4-block.

    Rows come in +e / -e pairs so the pooled channel mean is exactly mu, and
    |e| >= 3 > |mu| keeps the mask on the support of e for any shift between
    0 and mu. The zero-loss shift is therefore mu itself.
    """
    r = np.random.default_rng(seed)
    mu = r.uniform(-0.5, 0.5, size=h)
    rows = []
    for _ in range(tokens // 2):
        e = np.zeros(h)
        for b in range(h // 4):
            keep = r.choice(4, 2, replace=False) + 4 * b
            e[keep] = r.choice([-1, 1], 2) * r.uniform(3, 5, 2)
        rows += [mu + e, mu - e]
    X = np.array(rows)
    return [X[: tokens // 2], X[tokens // 2 :]], r.normal(size=(6, h)), mu


# -- baseline / shifts -----------------------------------------------------------


def test_baseline_dense_equals_matmul(rng):
    X, W = rng.normal(size=(3, 8)), rng.normal(size=(5, 8))
    np.testing.assert_array_equal(T.forward_baseline(X, W, "act", DENSE), X @ W.T)


def test_baseline_exact_when_mask_captures_all_mass(rng):
    X = np.zeros((2, 8))
    X[0, [0, 3, 5, 6]] = rng.normal(size=4)
    X[1, [1, 2, 4, 7]] = rng.normal(size=4)
    W = rng.normal(size=(3, 8))
    np.testing.assert_allclose(T.forward_baseline(X, W, "act", P24), X @ W.T, atol=1e-14)


def test_baseline_composition_oracle(rng):
    X, W = rng.normal(size=(2, 8)), rng.normal(size=(3, 8))
    mask = nm_mask(score_act(X), P24)
    np.testing.assert_allclose(T.forward_baseline(X, W, "act", P24), naive_matmul(apply_mask(X, mask), W), atol=1e-12)


def test_dpts_constant_rows_exact(rng):
    X = np.repeat(rng.normal(size=(3, 1)), 8, axis=1)
    W = rng.normal(size=(4, 8))
    np.testing.assert_allclose(T.forward_dpts(X, W, "act", P24), X @ W.T, atol=1e-12)


def test_dpts_dense_exact(rng):
    X, W = rng.normal(size=(3, 8)), rng.normal(size=(4, 8))
    np.testing.assert_allclose(T.forward_dpts(X, W, "act", DENSE), X @ W.T, atol=1e-12)


def test_dpts_step_by_step_oracle(rng):
    X, W = rng.normal(size=(3, 8)), rng.normal(size=(4, 8))
    Xl = X.tolist()
    shifted = []
    for row in Xl:
        eta = math.fsum(row) / len(row)
        z = [x - eta for x in row]
        kept = []
        for b in range(0, 8, 4):
            block = z[b : b + 4]
            top = sorted(range(4), key=lambda j: (-abs(block[j]), j))[:2]
            kept += [block[j] if j in top else 0.0 for j in range(4)]
        shifted.append([k + eta for k in kept])
    np.testing.assert_allclose(T.forward_dpts(X, W, "act", P24), naive_matmul(shifted, W), atol=1e-12)


def test_spts_calibration_examples(rng):
    r = rng.normal(size=6)
    np.testing.assert_allclose(T.calibrate_spts([np.tile(r, (5, 1))]).values, r, atol=1e-15)
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    np.testing.assert_allclose(T.calibrate_spts([a, b]).values, (a.mean(0) + b.mean(0)) / 2, atol=1e-14)
    c = rng.normal(size=(7, 6))
    np.testing.assert_allclose(T.calibrate_spts([a, c]).values, np.concatenate([a, c]).mean(0), atol=1e-14)
    assert T.calibrate_spts([a]).kind == "static"


def test_spts_calibration_errors(rng):
    with pytest.raises(ValueError, match="at least one"):
        T.calibrate_spts([])
    with pytest.raises(ValueError, match="hidden dim"):
        T.calibrate_spts([np.ones((2, 3)), np.ones((2, 4))])


def test_spts_examples(rng):
    X, W = rng.normal(size=(4, 8)), rng.normal(size=(3, 8))
    np.testing.assert_array_equal(T.forward_spts(X, W, np.zeros(8), "act", P24), T.forward_baseline(X, W, "act", P24))
    eta = T.calibrate_spts([rng.normal(size=(5, 8))])
    np.testing.assert_allclose(T.forward_spts(X, W, eta, "act", DENSE), X @ W.T, atol=1e-12)
    Z = X - eta.values
    Zm = apply_mask(Z, nm_mask(np.abs(Z), P24))
    np.testing.assert_allclose(T.forward_spts(X, W, eta, "act", P24), naive_matmul(Zm + eta.values, W), atol=1e-12)
    with pytest.raises(ValueError, match="channels"):
        T.forward_spts(X, W, np.zeros(5), "act", P24)


# -- VAR ------------------------------------------------------------------------


def test_var_dense_is_identity(rng):
    X, W = rng.normal(size=(4, 8)), rng.normal(size=(3, 8))
    np.testing.assert_array_equal(T.forward_var(X, W, "act", DENSE), X @ W.T)


def test_var_closed_form_single_kept():
    a = 2.5
    X = np.array([[a, 0.0, a, 0.0]])
    W = np.eye(4)
    out = T.forward_var(X, W, "act", PatternSpec(1, 4))
    # Var[a,0,a,0] = a^2/4, Var[a,0,0,0] = 3a^2/16
    nu = math.sqrt((a * a / 4) / (3 * a * a / 16))
    assert math.isclose(nu, math.sqrt(4 / 3))
    np.testing.assert_allclose(out, [[nu * a, 0, 0, 0]], atol=1e-14)
    assert math.isclose(row_var(out)[0], row_var(X)[0], rel_tol=1e-12)


def test_var_flat_masked_row_gets_unit_scale():
    X = np.array([[0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]])
    Xm = np.zeros_like(X)
    np.testing.assert_array_equal(T.var_scale(X, Xm), [1.0, 1.0])
    out = T.forward_var(np.zeros((1, 4)), np.eye(4), "act", P24)
    assert not out.any()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([P24, PatternSpec(8, 16), Unstructured(0.7)]))
def test_var_restores_token_variance(seed, pattern):
    X = np.random.default_rng(seed).normal(size=(5, 16))
    Xm = apply_mask(X, nm_mask(np.abs(X), pattern)) if isinstance(pattern, PatternSpec) else T.masked(X, None, "act", pattern)[0]
    nu = T.var_scale(X, Xm)
    live = row_var(Xm) > 0
    np.testing.assert_allclose(row_var(nu[:, None] * Xm)[live], row_var(X)[live], rtol=1e-9, atol=1e-12)


# -- PCS ------------------------------------------------------------------------


def test_pcs_unit_scale_equals_baseline(rng):
    X = rng.normal(size=(3, 4))
    W = rng.normal(size=(5, 4))
    # rescale W columns so max|W_:,j| == max|X_:,j|
    W = W / np.abs(W).max(axis=0) * np.abs(X).max(axis=0)
    np.testing.assert_allclose(T.pcs_scale(X, W), 1.0)
    np.testing.assert_allclose(T.forward_pcs(X, W, "act", P24), T.forward_baseline(X, W, "act", P24), atol=1e-12)


def test_pcs_dense_cancels(rng):
    X, W = rng.normal(size=(3, 8)) * [1, 10, 0.1, 5, 1, 1, 2, 3], rng.normal(size=(4, 8))
    np.testing.assert_allclose(T.forward_pcs(X, W, "act", DENSE), X @ W.T, atol=1e-12)


def test_pcs_explicit_diag_oracle(rng):
    X, W = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
    s = [math.sqrt(max(abs(X[i, j]) for i in range(2)) / max(abs(W[k, j]) for k in range(3))) for j in range(4)]
    S = np.diag(s)
    Xhat = X @ np.linalg.inv(S)
    mask = nm_mask(np.abs(Xhat), P24)
    expect = apply_mask(Xhat, mask) @ (S @ W.T)
    np.testing.assert_allclose(T.forward_pcs(X, W, "act", P24), expect, atol=1e-12)


def test_pcs_degenerate_channels_use_unit_scale():
    X = np.array([[0.0, 1.0], [0.0, 2.0]])
    W = np.array([[1.0, 0.0]])
    np.testing.assert_array_equal(T.pcs_scale(X, W), [1.0, 1.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pcs_mask_is_mask_of_scaled_input(seed):
    r = np.random.default_rng(seed)
    X, W = r.normal(size=(3, 8)) * r.uniform(0.1, 10, size=8), r.normal(size=(4, 8))
    s = T.pcs_scale(X, W)
    Xm, bits = T.masked(X / s, W, "act", P24)
    np.testing.assert_array_equal(bits, nm_mask(np.abs(X / s), P24).bits)
    np.testing.assert_allclose(T.forward_pcs(X, W, "act", P24), Xm @ (W * s).T, atol=1e-12)


# -- L-PTS / LS -------------------------------------------------------------------


def test_lpts_forward_identity_at_init(rng):
    X, W = rng.normal(size=(4, 8)), rng.normal(size=(3, 8))
    for with_var in (False, True):
        out = T.forward_lpts(X, W, np.zeros(8), "act", DENSE, np.ones(8), with_var)
        np.testing.assert_array_equal(out, X @ W.T)


@pytest.mark.parametrize("with_ls", [False, True])
def test_lpts_gradient_matches_finite_differences(with_ls, rng):
    batches = [rng.normal(size=(5, 8)), rng.normal(size=(3, 8))]
    W = rng.normal(size=(4, 8))
    eta = rng.normal(size=8) * 0.1
    d = rng.uniform(0.8, 1.2, size=8) if with_ls else None
    loss, g_eta, g_d = T.lpts_loss_and_grad(batches, W, eta, "act", P24, d)
    eps = 1e-6
    for j in range(8):
        e = np.zeros(8)
        e[j] = eps
        lp = T.lpts_loss_and_grad(batches, W, eta + e, "act", P24, d)[0]
        lm = T.lpts_loss_and_grad(batches, W, eta - e, "act", P24, d)[0]
        assert abs((lp - lm) / (2 * eps) - g_eta[j]) < 1e-6
        if with_ls:
            lp = T.lpts_loss_and_grad(batches, W, eta, "act", P24, d + e)[0]
            lm = T.lpts_loss_and_grad(batches, W, eta, "act", P24, d - e)[0]
            assert abs((lp - lm) / (2 * eps) - g_d[j]) < 1e-6


def test_fit_lpts_dense_needs_no_shift(rng):
    batches = [rng.normal(size=(6, 8))]
    params = T.fit_lpts(batches, rng.normal(size=(3, 8)), "act", DENSE, steps=20, lr=0.01)
    assert params.loss_trace[0] < 1e-20
    np.testing.assert_allclose(params.eta.values, 0.0, atol=1e-6)


def test_fit_lpts_recovers_pooled_mean():
    batches, W, mu = lpts_case()
    params = T.fit_lpts(batches, W, "act", P24, steps=400, lr=0.03)
    pooled = np.concatenate(batches).mean(axis=0)
    np.testing.assert_allclose(pooled, mu, atol=1e-12)
    np.testing.assert_allclose(params.eta.values, pooled, atol=1e-3)
    assert params.status == "ok"
    assert params.eta.kind == "learnable"


@pytest.mark.parametrize("transform", ["lpts", "var+lpts", "ls+lpts", "ls+lpts+var"])
def test_fit_lpts_descends_on_random_case(transform, rng):
    batches = [rng.normal(size=(8, 16)) + 0.7, rng.normal(size=(8, 16)) + 0.7]
    W = rng.normal(size=(5, 16))
    params = T.fit_lpts(batches, W, "act", PatternSpec(8, 16), steps=60, lr=0.02,
                        with_ls=transform.startswith("ls"), with_var="var" in transform)
    trace = params.loss_trace
    assert len(trace) == 61
    assert all(b <= a for a, b in zip(trace, trace[1:]))
    assert trace[-1] <= trace[0]
    assert (params.diag_scale is not None) == transform.startswith("ls")
    eta, d = params.eta.values, params.diag_scale
    achieved = T.lpts_loss_and_grad(batches, W, eta, "act", PatternSpec(8, 16), d, "var" in transform)[0]
    assert math.isclose(achieved, trace[-1], rel_tol=1e-12)


def test_fit_lpts_rejects_bad_arguments(rng):
    b = [rng.normal(size=(2, 4))]
    W = rng.normal(size=(2, 4))
    with pytest.raises(ValueError, match="steps"):
        T.fit_lpts(b, W, "act", P24, steps=0)
    with pytest.raises(ValueError, match="lr"):
        T.fit_lpts(b, W, "act", P24, steps=5, lr=0.0)


def test_fit_lpts_divergence_is_flagged(rng):
    b = [rng.normal(size=(4, 8))]
    W = rng.normal(size=(3, 8))
    params = T.fit_lpts(b, W, "act", P24, steps=50, lr=1e300, with_ls=True)
    assert params.status == "diverged"
    assert np.all(np.isfinite(params.eta.values))
    assert params.loss_trace and np.isfinite(params.loss_trace[-1])


# -- SVD / R-Sparse -----------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_jacobi_svd_reconstructs(rows, cols, seed):
    M = np.random.default_rng(seed).normal(size=(rows, cols))
    U, S, Vt = T.jacobi_svd(M)
    np.testing.assert_allclose((U * S) @ Vt, M, atol=1e-10)
    assert np.all(np.diff(S) <= 1e-12)
    np.testing.assert_allclose(S, np.linalg.svd(M, compute_uv=False), atol=1e-10)


def test_rsparse_full_rank_recovery(rng):
    W = rng.normal(size=(6, 8))
    f = T.rsparse_factors(W, 6)
    assert np.linalg.norm(f.product() - W) <= 1e-8


def test_rsparse_rank_one_exact(rng):
    W = np.outer(rng.normal(size=5), rng.normal(size=7))
    f = T.rsparse_factors(W, 1)
    np.testing.assert_allclose(f.product(), W, atol=1e-12)


def test_rsparse_truncation_error_matches_eigen_oracle(rng):
    W = rng.normal(size=(6, 8))
    f = T.rsparse_factors(W, 3)
    eig = np.sort(np.linalg.eigvalsh(W.T @ W))[::-1]
    assert abs(np.linalg.norm(f.product() - W) ** 2 - eig[3:].sum()) < 1e-6


def test_rsparse_rank_out_of_range(rng):
    W = rng.normal(size=(4, 6))
    for r in (0, 5):
        with pytest.raises(ValueError, match="rank"):
            T.rsparse_factors(W, r)


def test_rsparse_forward_examples(rng):
    X, W = rng.normal(size=(4, 16)), rng.normal(size=(5, 16))
    full = T.rsparse_factors(W, 5)
    np.testing.assert_allclose(T.forward_rsparse(X, W, full, "act", PatternSpec(8, 16)), X @ W.T, atol=1e-8)
    low = T.rsparse_factors(W, 2)
    np.testing.assert_array_equal(T.forward_rsparse(X, W, low, "act", DENSE), X @ W.T)
    mask = nm_mask(np.abs(X), PatternSpec(8, 16))
    Xm = apply_mask(X, mask)
    two_path = naive_matmul(Xm, W) + naive_matmul(X - Xm, low.product())
    np.testing.assert_allclose(T.forward_rsparse(X, W, low, "act", PatternSpec(8, 16)), two_path, atol=1e-10)
    with pytest.raises(ValueError, match="factors"):
        T.forward_rsparse(X, W, T.rsparse_factors(rng.normal(size=(3, 16)), 2), "act", P24)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_rsparse_error_bound(seed, r):
    g = np.random.default_rng(seed)
    X, W = g.normal(size=(6, 8)), g.normal(size=(5, 8))
    f = T.rsparse_factors(W, r)
    Xm = T.masked(X, W, "act", P24)[0]
    lhs = np.linalg.norm(T.forward_rsparse(X, W, f, "act", P24) - X @ W.T)
    rhs = np.linalg.norm(X - Xm) * np.linalg.norm(W - f.product(), 2)
    assert lhs <= rhs + 1e-8


# -- shared invariant -------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["act", "clact", "amber"]))
def test_all_transforms_exact_under_full_mask(seed, criterion):
    g = np.random.default_rng(seed)
    X, W = g.normal(size=(5, 8)) + g.normal(), g.normal(size=(4, 8))
    dense = X @ W.T
    eta = T.calibrate_spts([g.normal(size=(3, 8))])
    outs = [
        T.forward_baseline(X, W, criterion, DENSE),
        T.forward_dpts(X, W, criterion, DENSE),
        T.forward_spts(X, W, eta, criterion, DENSE),
        T.forward_var(X, W, criterion, DENSE),
        T.forward_pcs(X, W, criterion, DENSE),
        T.forward_lpts(X, W, np.zeros(8), criterion, DENSE, np.ones(8), True),
        T.forward_rsparse(X, W, T.rsparse_factors(W, 2), criterion, Unstructured(0.0)),
    ]
    for out in outs:
        np.testing.assert_allclose(out, dense, rtol=1e-10, atol=1e-10 * np.abs(dense).max())
