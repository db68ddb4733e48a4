import json
import math

import numpy as np
import pytest
from scipy.linalg import solve_triangular

from mrri.errors import CapacityError
from mrri.model import build_cov_matrix
from mrri.simulator import MetricsTable, SimConfig, preset, replicate_rng, run_replicates, run_study, simulate_dataset


def _residuals(cfg, data):
    theta = np.asarray(cfg.theta_true)
    beta = theta[cfg.spec.beta_slice]
    mu = np.full(data.N, beta[0]) if cfg.spec.mean_kind == "constant-intercept" else data.X @ beta
    return data.Y - mu[:, None]


def test_replicate_streams_are_keyed_by_seed_and_id():
    a = replicate_rng(1, 5).standard_normal(4)
    assert np.array_equal(a, replicate_rng(1, 5).standard_normal(4))
    assert not np.array_equal(a, replicate_rng(1, 6).standard_normal(4))
    assert not np.array_equal(a, replicate_rng(2, 5).standard_normal(4))


def test_simulation_is_deterministic():
    cfg = preset("sim1-desk", N=50)
    a, b = simulate_dataset(cfg, 3), simulate_dataset(cfg, 3)
    assert np.array_equal(a.Y, b.Y) and np.array_equal(a.X, b.X)
    assert not np.array_equal(a.Y, simulate_dataset(cfg, 4).Y)
    assert a.meta == {"config": "sim1-desk", "replicate_id": 3}


def test_pure_nugget_gives_independent_noise():
    cfg = preset("sim1-desk", boxes=[[(1, 3), (1, 3)]], N=20000,
                 theta_true=(0.0, 0.0, 0.0, -60.0, 0.0, math.log(1.6)))
    E = _residuals(cfg, simulate_dataset(cfg, 0))
    C = np.cov(E, rowvar=False)
    se = math.sqrt(2 * 1.6**2 / E.shape[0])
    assert np.all(np.abs(np.diag(C) - 1.6) < 4 * se)
    off = C[~np.eye(9, dtype=bool)]
    assert np.all(np.abs(off) < 4.5 * 1.6 / math.sqrt(E.shape[0]))


def test_stationary_covariance_matches_the_model():
    cfg = preset("sim1-desk", N=50000)
    data = simulate_dataset(cfg, 1)
    E = _residuals(cfg, data)
    C_emp = E.T @ E / E.shape[0]
    C = build_cov_matrix(cfg.domain(), data.X[0], np.asarray(cfg.theta_true), cfg.spec)
    d = np.diag(C)
    se = np.sqrt((np.outer(d, d) + C**2) / E.shape[0])
    z = (C_emp - C) / se
    # 5050 distinct entries; 4.5 SE keeps the family-wise false alarm near 3%
    assert np.max(np.abs(z)) < 4.5
    assert np.mean(np.abs(z) < 2) > 0.93


def test_nonstationary_draws_whiten_to_white_noise():
    cfg = preset("sim3-desk", N=1500)
    data = simulate_dataset(cfg, 2)
    E = _residuals(cfg, data)
    theta = np.asarray(cfg.theta_true)
    dom = cfg.domain()
    W = np.empty_like(E)
    for i in range(data.N):
        L = np.linalg.cholesky(build_cov_matrix(dom, data.X[i], theta, cfg.spec))
        W[i] = solve_triangular(L, E[i], lower=True)
    n = W.size
    assert abs(W.mean()) < 4 / math.sqrt(n)
    assert abs(W.var() - 1) < 4 * math.sqrt(2 / n)
    # neighbouring whitened coordinates are uncorrelated
    r = np.mean(W[:, 1:] * W[:, :-1])
    assert abs(r) < 4 / math.sqrt(W[:, 1:].size)


def test_covariates_follow_the_configured_law():
    cfg = preset("sim3-desk", N=20000)
    X = simulate_dataset(cfg, 0).X
    assert np.all(X[:, 0] == 1)
    assert np.allclose(X[:, 1:].var(axis=0), 1.0, atol=0.05)
    X4 = simulate_dataset(preset("sim1-desk", N=20000), 0).X
    assert np.allclose(X4[:, 1:].var(axis=0), 4.0, atol=0.2)


def test_marginal_means_are_the_model_means():
    cfg = preset("sim1-desk", N=20000)
    E = _residuals(cfg, simulate_dataset(cfg, 9))
    m = E.mean(axis=0)
    se = math.sqrt(3.0 + 1.6) / math.sqrt(E.shape[0])
    assert np.all(np.abs(m) < 4.5 * se)


def test_full_scale_preset_is_refused():
    with pytest.raises(CapacityError):
        simulate_dataset(preset("sim2"), 0)


def test_config_validation_and_round_trip():
    cfg = preset("sim3-desk")
    back = SimConfig.from_dict(json.loads(cfg.to_json()))
    assert back == cfg and back.config_hash() == cfg.config_hash()
    assert cfg.S == 200
    with pytest.raises(ValueError):
        cfg.with_(theta_true=(0.0,))
    with pytest.raises(ValueError):
        cfg.with_(estimators=("nope",))
    with pytest.raises(KeyError):
        preset("sim9")


def test_zero_replicates_rejected():
    with pytest.raises(ValueError):
        run_study(preset("sim1-desk", replicates=0))


def test_metric_identities():
    rng = np.random.default_rng(0)
    th = rng.normal(0.2, 0.5, size=(300, 4))
    se = np.full((300, 4), 0.5)
    m = MetricsTable.metrics(th, se, np.zeros(4))
    R = th.shape[0]
    lhs = m["RMSE"] ** 2
    rhs = m["BIAS"] ** 2 + m["ESE"] ** 2 * (R - 1) / R
    assert np.allclose(lhs, rhs, rtol=1e-10, atol=0)
    assert np.array_equal(m["ASE"], np.full(4, 0.5))
    cp = np.mean(np.abs(th) <= 1.959963984540054 * 0.5, axis=0)
    assert np.array_equal(m["CP"], cp)


def test_small_study_end_to_end():
    cfg = preset("sim1-desk", N=400, replicates=3)
    table = run_study(cfg)
    assert table.n_ok == {"recursive": 3, "sequential": 3}
    assert table.failures == {"recursive": 0, "sequential": 0}
    assert [r.name for r in table.estimators["sequential"]] == list(cfg.spec.param_names)
    out = json.loads(table.to_json())
    assert len(out["records"]) == 3 and "metrics" in out
    assert "recursive" in table.to_text() and "RMSEx1e4" in table.to_text()
    # leaf fits are shared between the two estimators in one replicate
    counters = table.records[0]["estimates"]["sequential"]["counters"]
    assert counters["reused_leaf_fits"] == 4
    assert table.thetas("recursive").shape == (3, 6)


def test_replicates_do_not_depend_on_worker_count():
    cfg = preset("sim1-desk", N=300, replicates=3)
    a = run_replicates(cfg, range(3), workers=1)
    b = run_replicates(cfg, range(3), workers=2)
    for ra, rb in zip(a, b):
        assert ra["estimates"]["recursive"]["theta"] == rb["estimates"]["recursive"]["theta"]
