import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import NS2, NS2_TAU, STAT, THETA_NS2, THETA_STAT, draw_block
from mrri.domain import grid_domain, multi_roi_grid
from mrri.errors import DimensionError, NonConvergenceError
from mrri.likelihood import (
    DataBlock,
    FitOptions,
    fit_local_mle,
    initial_theta,
    log_likelihood,
    per_observation_scores,
    score,
    sensitivity_block,
)
from mrri.model import ModelSpec, cov_stationary


def fd_gradient(block, theta, spec, step=1e-5):
    g = np.empty_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = step
        g[k] = (log_likelihood(block, theta + e, spec) - log_likelihood(block, theta - e, spec)) / (2 * step)
    return g


def fd_jacobian(block, theta, spec, step=1e-5):
    cols = []
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = step
        cols.append((score(block, theta + e, spec) - score(block, theta - e, spec)) / (2 * step))
    return np.column_stack(cols)


# -- log-likelihood ---------------------------------------------------------


def test_single_location_at_the_mean_has_closed_form():
    spec = ModelSpec("constant-intercept", "stationary-gaussian", q=1)
    tau2, sig2, N = 3.0, 1.6, 7
    theta = np.array([0.25, math.log(tau2), 0.0, math.log(sig2)])
    block = DataBlock(np.full((N, 1), 0.25), np.ones((N, 1)), np.zeros((1, 2)))
    expected = -0.5 * N * math.log(2 * math.pi * (tau2 + sig2))
    assert log_likelihood(block, theta, spec) == pytest.approx(expected, rel=1e-14)


def test_far_apart_locations_are_independent():
    coords = np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 100.0]])
    rng = np.random.default_rng(3)
    X = np.column_stack([np.ones(4), rng.normal(size=(4, 2))])
    Y = rng.normal(size=(4, 3))
    theta = THETA_STAT
    block = DataBlock(Y, X, coords)
    var = 3.0 + 1.6
    mu = X @ theta[:3]
    uni = -0.5 * (np.log(2 * np.pi * var) + (Y - mu[:, None]) ** 2 / var)
    assert log_likelihood(block, theta, STAT) == pytest.approx(uni.sum(), rel=1e-13)


def test_matches_dense_density_oracle():
    # S = 3, N = 2, density evaluated in 40-digit arithmetic
    mp.mp.dps = 40
    rng = np.random.default_rng(11)
    coords = rng.uniform(0, 2, size=(3, 2))
    X = np.column_stack([np.ones(2), rng.normal(size=(2, 2))])
    Y = rng.normal(size=(2, 3))
    theta = np.array([0.1, -0.4, 0.2, 0.7, -0.3, -0.5])
    C = mp.matrix(3, 3)
    for j in range(3):
        for k in range(3):
            C[j, k] = cov_stationary(coords[j], coords[k], math.exp(theta[3]), math.exp(theta[4]))
        C[j, j] += mp.e ** mp.mpf(theta[5])
    Cinv, det = C**-1, mp.det(C)
    total = mp.mpf(0)
    for i in range(2):
        r = mp.matrix([Y[i, j] - float(X[i] @ theta[:3]) for j in range(3)])
        total += -0.5 * (3 * mp.log(2 * mp.pi) + mp.log(det) + (r.T * Cinv * r)[0])
    got = log_likelihood(DataBlock(Y, X, coords), theta, STAT)
    assert abs(got - float(total)) <= 1e-10 * abs(float(total))


def test_layout_mismatch_raises(grid5):
    block = DataBlock(np.zeros((3, 25)), np.ones((3, 2)), grid5.coords)
    with pytest.raises(DimensionError):
        log_likelihood(block, THETA_STAT, STAT)


# -- scores -----------------------------------------------------------------


def _random_instance(kind, seed):
    rng = np.random.default_rng(seed)
    S, N = int(rng.integers(2, 8)), int(rng.integers(1, 6))
    if kind == "stationary":
        coords = rng.uniform(0, 3, size=(S, 2))
        spec, roi = STAT, None
        theta = np.concatenate([rng.normal(size=3), rng.normal(0, 0.5, size=3)])
    else:
        S = max(S, 2)
        coords = rng.uniform(0, 3, size=(S, int(rng.integers(1, 4))))
        roi = np.sort(np.r_[1, 2, rng.integers(1, 3, size=S - 2)])
        spec = NS2_TAU if seed % 2 else NS2
        theta = rng.normal(0, 0.5, size=spec.p)
    X = np.column_stack([np.ones(N), rng.normal(size=(N, 2))])
    if seed % 3 == 0 and N > 1:
        X[1:] = X[0]  # repeated covariate rows use the grouped path
    Y = rng.normal(size=(N, S)) * 2
    return DataBlock(Y, X, coords, roi), theta, spec


@pytest.mark.parametrize("kind", ["stationary", "nonstationary"])
@pytest.mark.parametrize("seed", range(50))
def test_score_matches_finite_differences(kind, seed):
    block, theta, spec = _random_instance(kind, seed)
    g = score(block, theta, spec)
    fd = fd_gradient(block, theta, spec)
    scale = np.max(np.abs(fd))
    assert np.max(np.abs(g - fd)) <= 1e-5 * scale
    big = np.abs(fd) >= 1e-2 * scale
    assert np.all(np.abs(g - fd)[big] <= 1e-5 * np.abs(fd)[big])


def test_per_observation_rows_sum_to_score(two_roi_small):
    block = draw_block(NS2, THETA_NS2, two_roi_small.coords, two_roi_small.roi, 40, 1, x_sd=1.0)
    sm = per_observation_scores(block, THETA_NS2, NS2)
    assert sm.values.shape == (40, NS2.p)
    assert np.allclose(sm.values.sum(axis=0), score(block, THETA_NS2, NS2), rtol=1e-12, atol=1e-12)
    one = block.take_rows([5])
    assert np.array_equal(per_observation_scores(one, THETA_NS2, NS2).values[0], score(one, THETA_NS2, NS2))


def test_sensitivity_block_is_symmetric_psd():
    rng = np.random.default_rng(0)
    psi = rng.normal(size=(1, 6))
    B = sensitivity_block(psi)
    assert np.linalg.matrix_rank(B) == 1
    psi = rng.normal(size=(30, 6))
    B = sensitivity_block(psi)
    assert np.array_equal(B, B.T)
    assert np.linalg.eigvalsh(B).min() >= -1e-12


def test_mean_scores_have_zero_expectation_at_truth(grid5):
    block = draw_block(STAT, THETA_STAT, grid5.coords[:9], None, 10000, 5)
    psi = per_observation_scores(block, THETA_STAT, STAT).values
    z = psi.mean(axis=0) / (psi.std(axis=0, ddof=1) / math.sqrt(psi.shape[0]))
    assert np.all(np.abs(z) < 4)


def test_bartlett_identity_at_the_mle():
    coords = grid_domain((1, 3), (1, 3)).coords
    block = draw_block(STAT, THETA_STAT, coords, None, 5000, 8)
    est = fit_local_mle(block, STAT, opts=FitOptions(tol=1e-10))
    B = sensitivity_block(est.scores)
    H = -fd_jacobian(block, est.theta, STAT)
    H = 0.5 * (H + H.T)
    assert np.linalg.norm(B - H) / np.linalg.norm(H) < 0.05


def test_bartlett_identity_nonstationary(two_roi_small):
    block = draw_block(NS2, THETA_NS2, two_roi_small.coords, two_roi_small.roi, 4000, 9, x_sd=1.0)
    psi = per_observation_scores(block, THETA_NS2, NS2).values
    H = -fd_jacobian(block, THETA_NS2, NS2)
    assert np.linalg.norm(psi.T @ psi - H) / np.linalg.norm(H) < 0.1


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), grouped=st.booleans())
def test_row_order_does_not_change_anything(seed, grouped):
    dom = multi_roi_grid([[(1, 2), (1, 3)], [(4, 5), (1, 3)]])
    block = draw_block(NS2, THETA_NS2, dom.coords, dom.roi, 60, seed, x_sd=1.0, x_levels=6 if grouped else None)
    perm = np.random.default_rng(seed + 1).permutation(block.N)
    other = block.take_rows(perm)
    assert log_likelihood(block, THETA_NS2, NS2) == log_likelihood(other, THETA_NS2, NS2)
    assert np.array_equal(score(block, THETA_NS2, NS2), score(other, THETA_NS2, NS2))


def test_mle_invariant_to_row_order(grid5):
    block = draw_block(STAT, THETA_STAT, grid5.coords, None, 400, 21)
    perm = np.random.default_rng(0).permutation(block.N)
    a = fit_local_mle(block, STAT)
    b = fit_local_mle(block.take_rows(perm), STAT)
    assert np.array_equal(a.theta, b.theta)


# -- leaf MLE ---------------------------------------------------------------


def test_fit_converges_and_restart_is_a_fixed_point(grid5):
    block = draw_block(STAT, THETA_STAT, grid5.coords, None, 2000, 4)
    est = fit_local_mle(block, STAT)
    ll = est.diagnostics["loglik"]
    assert np.max(np.abs(score(block, est.theta, STAT))) <= 1e-6 * abs(ll)
    again = fit_local_mle(block, STAT, init=est.theta)
    assert again.diagnostics["iterations"] <= 2
    assert np.allclose(again.theta, est.theta, atol=1e-6)
    assert est.method == "leaf-mle" and est.scores.values.shape == (2000, 6)


def test_fit_is_consistent_over_replicates(grid5):
    # 20 replicates, S=25, N=5000: every component within 4 ASE of the truth
    hits = []
    for rep in range(20):
        block = draw_block(STAT, THETA_STAT, grid5.coords, None, 5000, 100 + rep)
        est = fit_local_mle(block, STAT)
        hits.append(np.abs(est.theta - THETA_STAT) <= 4 * est.se)
    assert np.mean(hits, axis=0).min() >= 0.95


def test_constant_outcomes_are_reported_not_fitted(grid5):
    block = DataBlock(np.full((50, 25), 2.0), np.column_stack([np.ones(50), np.zeros((50, 2))]), grid5.coords)
    with pytest.raises(NonConvergenceError):
        fit_local_mle(block, STAT)


def test_iteration_cap_raises_with_best_iterate(grid5):
    block = draw_block(STAT, THETA_STAT, grid5.coords, None, 500, 2)
    with pytest.raises(NonConvergenceError) as info:
        fit_local_mle(block, STAT, opts=FitOptions(max_iter=1))
    assert info.value.best is not None and info.value.best.shape == (6,)


def test_initial_theta_is_finite_and_scale_aware(two_roi_small):
    block = draw_block(NS2, THETA_NS2, two_roi_small.coords, two_roi_small.roi, 300, 3, x_sd=1.0)
    x0 = initial_theta(block, NS2)
    assert np.all(np.isfinite(x0))
    # total variance 4.6 split 80/20
    assert math.exp(x0[1]) + math.exp(x0[-1]) == pytest.approx(4.6, rel=0.25)


def test_nonstationary_fit_recovers_truth():
    dom = multi_roi_grid([[(1, 4), (1, 4)], [(6, 9), (1, 4)]])
    block = draw_block(NS2, THETA_NS2, dom.coords, dom.roi, 1500, 12, x_sd=1.0)
    est = fit_local_mle(block, NS2)
    assert np.all(np.abs(est.theta - THETA_NS2) <= 4 * est.se)
