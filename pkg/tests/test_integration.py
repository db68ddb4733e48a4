import warnings

import numpy as np
import pytest

from conftest import STAT, THETA_STAT, draw_block
from mrri.domain import build_partition, grid_domain
from mrri.errors import DimensionError, SingularVariabilityError
from mrri.integration import (
    IntegrationOptions,
    RidgePolicy,
    StackedScores,
    factor_variability,
    gmm_objective,
    gmm_oracle,
    meta_estimator,
    recursive_integrate,
    reduce_node,
    sequential_integrate,
    stacked_sensitivity,
    variability,
    weighted_scores,
)
from mrri.likelihood import ScoreMatrix, fit_local_mle, per_observation_scores
from mrri.runtime import Dataset


@pytest.fixture(scope="module")
def field6():
    dom = grid_domain((1, 6), (1, 6))
    block = draw_block(STAT, THETA_STAT, dom.coords, None, 2000, 77)
    return dom, Dataset(block.Y, block.X, dom.coords)


@pytest.fixture(scope="module")
def tree22(field6):
    return build_partition(field6[0], 2, (2, 2), min_leaf_size=9)


@pytest.fixture(scope="module")
def leaves22(field6, tree22):
    return {p: fit_local_mle(field6[1].block(tree22.nodes[p], p), STAT) for p in tree22.leaves()}


# -- variability and the closed form ----------------------------------------


def test_variability_is_the_sum_of_outer_products():
    rng = np.random.default_rng(0)
    psi = rng.normal(size=(50, 8))
    V, eps = variability(psi)
    brute = sum(np.outer(r, r) for r in psi)
    assert eps == 0.0
    assert np.allclose(V, brute, rtol=1e-13, atol=1e-12)


def test_single_row_needs_the_ridge():
    psi = np.random.default_rng(1).normal(size=(1, 4))
    with pytest.warns(RuntimeWarning):
        V, eps = variability(psi)
    assert eps > 0
    assert np.all(np.linalg.eigvalsh(V) > 0)


def test_ridge_gives_up_on_a_zero_matrix():
    with pytest.raises(SingularVariabilityError):
        factor_variability(np.zeros((3, 3)))
    assert RidgePolicy(max_eps=1e-6).levels == pytest.approx([1e-10, 1e-8, 1e-6])


def test_one_child_returns_its_own_estimate(leaves22):
    leaf = leaves22[(1, 1)]
    res = reduce_node((1,), [leaf.scores], [leaf.theta])
    assert np.allclose(res.estimate.theta, leaf.theta, rtol=0, atol=1e-12)
    # with S = V the projection is the identity up to sign
    assert np.allclose(res.projected.values, -leaf.scores.values, atol=1e-12)


def test_scalar_inverse_variance_weighting():
    # orthogonal score columns make V diagonal with V_kk = S_k
    rng = np.random.default_rng(2)
    Q, _ = np.linalg.qr(rng.normal(size=(40, 2)))
    psi = Q * np.array([2.0, 5.0])
    s = (psi**2).sum(axis=0)
    S = np.array([[s[0], s[1]]])
    V, _ = variability(psi)
    est = meta_estimator(S, V, [np.array([1.0]), np.array([3.0])])
    expected = (s[0] * 1.0 + s[1] * 3.0) / (s[0] + s[1])
    assert est.theta[0] == pytest.approx(expected, rel=1e-12)
    assert est.J[0, 0] == pytest.approx(s.sum(), rel=1e-12)


def test_duplicated_children_reduce_to_one(leaves22):
    leaf = leaves22[(2, 1)]
    res = reduce_node((2,), [leaf.scores, leaf.scores], [leaf.theta, leaf.theta])
    assert res.estimate.ridge_eps > 0
    assert np.allclose(res.estimate.theta, leaf.theta, atol=1e-6)


def test_projection_identity(leaves22):
    blocks = [leaves22[p].scores for p in [(1, 1), (1, 2)]]
    stacked = StackedScores.from_children(blocks)
    S = stacked_sensitivity(stacked)
    V, _ = variability(stacked)
    proj = weighted_scores(S, V, stacked)
    direct = -S @ np.linalg.solve(V, stacked.values.sum(axis=0))
    assert proj.shape == (2000, 6)
    assert np.allclose(proj.sum(axis=0), direct, rtol=1e-10, atol=1e-10 * np.abs(direct).max())
    # the projected rows carry exactly the Godambe information S V^-1 S'
    J = S @ np.linalg.solve(V, S.T)
    assert np.max(np.abs(proj.T @ proj - J)) <= 1e-10 * np.max(np.abs(J))


def test_meta_estimator_checks_shapes():
    with pytest.raises(DimensionError):
        meta_estimator(np.eye(2, 6), np.eye(6), [np.zeros(2)])


# -- trees ------------------------------------------------------------------


def test_single_leaf_tree_is_the_full_mle(field6):
    dom, data = field6
    # 4x4 sub-grid, M = 1, K = 1
    idx = np.flatnonzero((dom.coords <= 4).all(axis=1))
    sub = Dataset(data.Y[:, idx], data.X, dom.coords[idx])
    tree = build_partition(grid_domain((1, 4), (1, 4)), 1, (1,), min_leaf_size=16)
    root = recursive_integrate(tree, sub, STAT)
    full = fit_local_mle(sub.block(np.arange(16)), STAT)
    assert np.allclose(root.theta, full.theta, atol=1e-12)


def test_one_level_tree_is_one_meta_step(field6):
    dom, data = field6
    tree = build_partition(dom, 1, (4,), min_leaf_size=9)
    fits = [fit_local_mle(data.block(tree.nodes[p], p), STAT) for p in tree.leaves()]
    ref = reduce_node((), [f.scores for f in fits], [f.theta for f in fits]).estimate
    rec = recursive_integrate(tree, data, STAT)
    seq = sequential_integrate(tree, data, STAT)
    assert np.array_equal(rec.theta, ref.theta)
    assert np.array_equal(seq.theta, rec.theta)


def test_two_level_tree_reports_every_node(field6, tree22, leaves22):
    nodes = {}
    cache = dict(leaves22)
    rec = recursive_integrate(tree22, field6[1], STAT, nodes=nodes, leaf_fits=cache)
    assert set(nodes) == {(), (1,), (2,), (1, 1), (1, 2), (2, 1), (2, 2)}
    assert np.array_equal(nodes[()].theta, rec.theta)
    assert rec.method == "recursive"
    assert rec.counters["reused_leaf_fits"] == 4
    # every node estimate is close to the truth at N = 2000
    for est in nodes.values():
        assert np.all(np.abs(est.theta - THETA_STAT) < 5 * est.se)


def test_counters_follow_the_plan(field6, tree22, leaves22):
    cache = dict(leaves22)
    rec = recursive_integrate(tree22, field6[1], STAT, leaf_fits=cache)
    seq = sequential_integrate(tree22, field6[1], STAT, leaf_fits=cache)
    for est in (rec, seq):
        pred = est.diagnostics["predicted"]
        for k in pred:
            assert est.counters[k] == pred[k]
    assert rec.counters["score_evals"] == 2 * 4
    assert seq.counters["score_evals"] == 4
    assert rec.counters["reduces"] == seq.counters["reduces"] == 3


def test_runs_are_deterministic(field6, tree22):
    a = sequential_integrate(tree22, field6[1], STAT)
    b = sequential_integrate(tree22, field6[1], STAT)
    assert np.array_equal(a.theta, b.theta) and np.array_equal(a.J, b.J)


def test_estimators_are_close_to_each_other(field6, tree22, leaves22):
    cache = dict(leaves22)
    rec = recursive_integrate(tree22, field6[1], STAT, leaf_fits=cache)
    seq = sequential_integrate(tree22, field6[1], STAT, leaf_fits=cache)
    full = fit_local_mle(field6[1].block(np.arange(36)), STAT)
    assert np.all(np.abs(rec.theta - seq.theta) < 0.5 * full.se)


# -- GMM oracle -------------------------------------------------------------


def _producer(data, tree, paths):
    blocks = [data.block(tree.nodes[p], p) for p in paths]
    return lambda th: np.hstack([per_observation_scores(b, th, STAT).values for b in blocks])


def test_gmm_oracle_with_one_block_is_the_mle(field6, tree22, leaves22):
    leaf = leaves22[(1, 1)]
    V = leaf.scores.values.T @ leaf.scores.values
    prod = _producer(field6[1], tree22, [(1, 1)])
    got = gmm_oracle(prod, V, leaf.theta + 0.05)
    assert np.allclose(got, leaf.theta, atol=1e-6)


def test_gmm_oracle_does_not_lose_to_the_closed_form(field6, tree22, leaves22):
    paths = [(1, 1), (1, 2)]
    res = reduce_node((1,), [leaves22[p].scores for p in paths], [leaves22[p].theta for p in paths])
    stacked = np.hstack([leaves22[p].scores.values for p in paths])
    V = stacked.T @ stacked
    prod = _producer(field6[1], tree22, paths)
    oracle = gmm_oracle(prod, V, res.estimate.theta)
    assert gmm_objective(oracle, prod, V) <= gmm_objective(res.estimate.theta, prod, V) + 1e-12
    # they differ only at second order, a fraction of one standard error
    assert np.all(np.abs(oracle - res.estimate.theta) < 0.25 * res.estimate.se)


def test_ridge_is_recorded_when_it_fires():
    rng = np.random.default_rng(4)
    psi = rng.normal(size=(30, 3))
    blocks = [ScoreMatrix(psi, np.zeros(3)), ScoreMatrix(psi.copy(), np.zeros(3))]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        res = reduce_node((), blocks, [np.ones(3), np.ones(3)])
    assert res.estimate.ridge_eps in RidgePolicy().levels
    assert IntegrationOptions().ridge.max_eps == 1e-6
