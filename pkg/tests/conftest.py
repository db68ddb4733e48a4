import math

import numpy as np
import pytest

from mrri.domain import grid_domain, multi_roi_grid
from mrri.likelihood import DataBlock
from mrri.model import ModelSpec, build_cov_matrix

STAT = ModelSpec("linear-in-X", "stationary-gaussian", q=3)
NS2 = ModelSpec("constant-intercept", "nonstationary-ps", q=3, roi_count=2)
NS2_TAU = ModelSpec("constant-intercept", "nonstationary-ps", q=3, roi_count=2, tau_structure="per-roi-tau2")

THETA_STAT = np.array([0.3, 0.6, 0.8, math.log(3.0), math.log(0.5), math.log(1.6)])
THETA_NS2 = np.array([0.0, math.log(3.0), 0.5, 0.5, 0.5, 0.6, 0.6, 0.6, math.log(1.6)])


def draw_block(spec, theta, coords, roi, N, seed, x_sd=2.0, x_levels=None):
    """Independent Gaussian draws built row by row from build_cov_matrix.

    ``x_levels`` restricts covariates to that many distinct rows.
    """
    rng = np.random.default_rng(seed)
    q = spec.q
    n_x = N if x_levels is None else x_levels
    Xu = np.column_stack([np.ones(n_x), rng.normal(0, x_sd, size=(n_x, q - 1))])
    X = Xu if x_levels is None else Xu[rng.integers(0, x_levels, size=N)]
    locs = type("L", (), {"coords": coords, "roi": roi})()
    beta = theta[spec.beta_slice]
    Y = np.empty((N, coords.shape[0]))
    cache = {}
    for i in range(N):
        key = X[i].tobytes() if not spec.stationary else b""
        if key not in cache:
            cache[key] = np.linalg.cholesky(build_cov_matrix(locs, X[i], theta, spec))
        mu = beta[0] if spec.mean_kind == "constant-intercept" else X[i] @ beta
        Y[i] = mu + cache[key] @ rng.standard_normal(coords.shape[0])
    return DataBlock(Y, X, coords, roi)


@pytest.fixture(scope="session")
def grid5():
    return grid_domain((1, 5), (1, 5))


@pytest.fixture(scope="session")
def two_roi_small():
    return multi_roi_grid([[(1, 3), (1, 3)], [(5, 7), (1, 3)]])
