"""Local Gaussian likelihoods, analytic scores and the leaf MLE solver.

For observation ``i`` with residual ``r_i`` and covariance ``C_i`` the
score of a covariance parameter ``t`` is

    0.5 * (a_i' dC_i/dt a_i - tr(C_i^{-1} dC_i/dt)),   a_i = C_i^{-1} r_i

and the mean part is ``Z_i' a_i``.  For the nonstationary kernel, derivatives
with respect to ROI coefficients have the form ``diag(u) E + E' diag(u)`` so
the score reduces to location-wise sums and never needs the full derivative
matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve
from scipy.linalg.lapack import dpotrf, dpotri

from .errors import DimensionError, NonConvergenceError, NonPositiveDefiniteError
from .estimates import MetaEstimate
from .model import (
    JITTER_LEVELS,
    ModelSpec,
    ThetaParams,
    cholesky_jittered,
    mean_design,
    nonstationary_kernel,
    sq_distances,
    stationary_kernel,
)

LOG_2PI = math.log(2.0 * math.pi)
# elements per (G, S, S) working array in the batched nonstationary path
_CHUNK_ELEMENTS = 250_000


@dataclass
class DataBlock:
    """Observations restricted to one partition node.

    ``Y`` is (N, S_block), ``X`` is (N, q), ``coords`` is (S_block, d) and
    ``roi`` holds 1-based ROI labels for the block's locations.
    """

    Y: np.ndarray
    X: np.ndarray
    coords: np.ndarray
    roi: np.ndarray | None = None
    path: tuple = ()
    _canon: object = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=np.float64))
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim == 1:
            self.coords = self.coords[:, None]
        if self.roi is None:
            self.roi = np.ones(self.coords.shape[0], dtype=np.int64)
        self.roi = np.asarray(self.roi, dtype=np.int64).reshape(-1)
        self.path = tuple(self.path)
        if self.Y.shape[0] != self.X.shape[0]:
            raise DimensionError("Y and X must have the same number of rows")
        if self.Y.shape[1] != self.coords.shape[0] or self.roi.size != self.coords.shape[0]:
            raise DimensionError("Y columns, coords and roi labels must align")

    @property
    def N(self) -> int:
        return self.Y.shape[0]

    @property
    def S(self) -> int:
        return self.Y.shape[1]

    def take_rows(self, rows) -> "DataBlock":
        return DataBlock(self.Y[rows], self.X[rows], self.coords, self.roi, self.path)

    def canonical(self):
        """``(order, sorted_block)`` with rows sorted by content (X, then Y).

        Evaluating in this order makes every per-row result independent of
        how the caller ordered the observations.
        """
        if self._canon is None:
            keys = [self.Y[:, j] for j in range(self.S - 1, -1, -1)]
            keys += [self.X[:, j] for j in range(self.X.shape[1] - 1, -1, -1)]
            order = np.lexsort(keys)
            if np.array_equal(order, np.arange(self.N)):
                self._canon = (None, self)
            else:
                self._canon = (order, DataBlock(self.Y[order], self.X[order], self.coords, self.roi, self.path))
        return self._canon


@dataclass
class ScoreMatrix:
    """Per-observation scores: row ``i`` is ``psi_i(theta)``."""

    values: np.ndarray
    theta_at: np.ndarray
    path: tuple = ()

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    @property
    def total(self) -> np.ndarray:
        return self.values.sum(axis=0)


@dataclass
class FitOptions:
    tol: float = 1e-6
    step_tol: float = 1e-9
    max_iter: int = 500
    boundary: float = 50.0  # |log variance| beyond this is a boundary failure
    max_step: float = 1.0  # largest trial change of any component per iteration


def _vec(theta, spec: ModelSpec) -> np.ndarray:
    v = theta.vector if isinstance(theta, ThetaParams) else np.asarray(theta, dtype=np.float64)
    v = v.reshape(-1)
    if v.size != spec.p:
        raise DimensionError(f"expected {spec.p} parameters, got {v.size}")
    return v


def _check_block(block: DataBlock, spec: ModelSpec) -> None:
    if block.X.shape[1] != spec.q:
        raise DimensionError(f"block has {block.X.shape[1]} covariates, model expects {spec.q}")
    if block.roi.max() > spec.roi_count or block.roi.min() < 1:
        raise DimensionError("block ROI labels outside the model's ROI range")


# ---------------------------------------------------------------------------
# evaluation engine
# ---------------------------------------------------------------------------


def _stationary_eval(block, theta, spec, want_scores):
    h = sq_distances(block.coords)
    K = stationary_kernel(h, theta, spec)
    sig2 = math.exp(theta[-1])
    S = block.S
    C = K + sig2 * np.eye(S)
    L, added = cholesky_jittered(C)
    Z = mean_design(spec, block.X)
    resid = block.Y - (Z @ theta[spec.beta_slice])[:, None]
    alpha = cho_solve((L, True), resid.T).T
    logdet = 2.0 * np.log(np.diag(L)).sum()
    ll = -0.5 * (S * LOG_2PI + logdet + np.einsum("ij,ij->i", resid, alpha))
    if not want_scores:
        return ll, None
    Cinv = cho_solve((L, True), np.eye(S))
    psi = np.empty((block.N, spec.p))
    psi[:, spec.beta_slice] = Z * alpha.sum(axis=1)[:, None]
    k0 = spec.q1
    # d/d log tau2 -> K ; d/d log rho2 -> -rho2 h K
    for k, dK in enumerate((K, -math.exp(theta[k0 + 1]) * h * K)):
        quad = np.einsum("ij,ij->i", alpha @ dK, alpha)
        psi[:, k0 + k] = 0.5 * (quad - np.sum(Cinv * dK))
    psi[:, -1] = 0.5 * sig2 * (np.einsum("ij,ij->i", alpha, alpha) - np.trace(Cinv))
    return ll, psi


def _inverse_batch(C: np.ndarray):
    """Inverses and log-determinants of a stack of SPD matrices.

    One LAPACK Cholesky and inverse per matrix; a matrix that fails the
    factorization gets the same jitter escalation as
    :func:`cholesky_jittered`.
    """
    G, S, _ = C.shape
    inv = np.empty_like(C)
    logdet = np.empty(G)
    for g in range(G):
        c, info = dpotrf(C[g], lower=1, clean=0)
        if info != 0:
            scale = float(np.mean(np.diag(C[g])))
            for eps in JITTER_LEVELS:
                c, info = dpotrf(C[g] + eps * scale * np.eye(S), lower=1, clean=0)
                if info == 0:
                    break
            else:
                raise NonPositiveDefiniteError(
                    f"covariance not positive definite after jitter levels {JITTER_LEVELS}", JITTER_LEVELS
                )
        logdet[g] = 2.0 * np.log(np.diag(c)).sum()
        inv[g], info = dpotri(c, lower=1)
    # dpotri fills the lower triangle only
    inv = np.tril(inv)
    inv += np.tril(inv, -1).transpose(0, 2, 1)
    return inv, logdet


def _ns_groups(block, theta, spec, Xg, resid, h, roi_idx, masks, want_scores):
    """Batched terms for G covariate groups; ``resid`` is (G, n, S)."""
    d = block.coords.shape[1]
    S = block.S
    sig2 = math.exp(theta[-1])
    eye = np.eye(S)
    if want_scores:
        K, D = nonstationary_kernel(h, roi_idx, Xg, theta, spec, d, derivative=True)
    else:
        K = nonstationary_kernel(h, roi_idx, Xg, theta, spec, d)
    if not np.all(np.isfinite(K)):
        raise NonPositiveDefiniteError("covariance has non-finite entries", ())
    Cinv, logdet = _inverse_batch(K + sig2 * eye)
    alpha = resid @ Cinv
    ll = -0.5 * (S * LOG_2PI + logdet[:, None] + np.einsum("gns,gns->gn", resid, alpha))
    if not want_scores:
        return ll, None
    G, n = resid.shape[:2]
    psi = np.empty((G, n, spec.p))
    sa = alpha.sum(axis=2)
    if spec.mean_kind == "constant-intercept":
        psi[:, :, 0] = sa
    else:
        psi[:, :, spec.beta_slice] = Xg[:, None, :] * sa[:, :, None]
    # tau terms: dC/dlog tau_r^2 = (diag(u_r) K + K diag(u_r)) / 2
    b = alpha * (alpha @ K) - np.einsum("gjk,gjk->gj", K, Cinv)[:, None, :]
    t0 = spec.tau_slice.start
    if spec.n_tau == 1:
        psi[:, :, t0] = 0.5 * b.sum(axis=2)
    else:
        for r, mask in enumerate(masks):
            psi[:, :, t0 + r] = 0.5 * b[:, :, mask].sum(axis=2)
    # range coefficients: dC/d rho_{r,l} = X_l (diag(u_r) D + D' diag(u_r))
    a = alpha * (alpha @ D.transpose(0, 2, 1)) - np.einsum("gjk,gjk->gj", D, Cinv)[:, None, :]
    for r, mask in enumerate(masks, start=1):
        A_r = a[:, :, mask].sum(axis=2)
        psi[:, :, spec.rho_slice(r)] = Xg[:, None, :] * A_r[:, :, None]
    psi[:, :, -1] = 0.5 * sig2 * (
        np.einsum("gns,gns->gn", alpha, alpha) - np.trace(Cinv, axis1=1, axis2=2)[:, None]
    )
    return ll, psi


def _nonstationary_eval(block, theta, spec, want_scores):
    h = sq_distances(block.coords)
    roi_idx = block.roi - 1
    masks = [roi_idx == r for r in range(spec.roi_count)]
    Z = mean_design(spec, block.X)
    resid = block.Y - (Z @ theta[spec.beta_slice])[:, None]
    N, S = resid.shape
    ll = np.empty(N)
    psi = np.empty((N, spec.p)) if want_scores else None
    uniq, inv = np.unique(block.X, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    if uniq.shape[0] == N:
        # every row has its own covariance: batch over rows
        step = max(1, _CHUNK_ELEMENTS // (S * S))
        for lo in range(0, N, step):
            sl = slice(lo, min(N, lo + step))
            l_, p_ = _ns_groups(
                block, theta, spec, block.X[sl], resid[sl, None, :], h, roi_idx, masks, want_scores
            )
            ll[sl] = l_[:, 0]
            if want_scores:
                psi[sl] = p_[:, 0, :]
    else:
        for g in range(uniq.shape[0]):
            rows = np.flatnonzero(inv == g)
            l_, p_ = _ns_groups(
                block, theta, spec, uniq[g : g + 1], resid[None, rows, :], h, roi_idx, masks, want_scores
            )
            ll[rows] = l_[0]
            if want_scores:
                psi[rows] = p_[0]
    return ll, psi


def evaluate(block: DataBlock, theta, spec: ModelSpec, want_scores: bool = True):
    """Per-observation log-likelihood and (optionally) score rows."""
    _check_block(block, spec)
    theta = _vec(theta, spec)
    order, sblock = block.canonical()
    run = _stationary_eval if spec.stationary else _nonstationary_eval
    ll, psi = run(sblock, theta, spec, want_scores)
    if order is None:
        return ll, psi
    ll_out = np.empty_like(ll)
    ll_out[order] = ll
    if psi is None:
        return ll_out, None
    psi_out = np.empty_like(psi)
    psi_out[order] = psi
    return ll_out, psi_out


def exact_sum(values: np.ndarray) -> np.ndarray:
    """Column sums rounded once (``math.fsum``), hence independent of row order."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        return np.float64(math.fsum(values))
    return np.array([math.fsum(col) for col in values.T])


def log_likelihood(block: DataBlock, theta, spec: ModelSpec) -> float:
    ll, _ = evaluate(block, theta, spec, want_scores=False)
    return float(exact_sum(ll))


def per_observation_scores(block: DataBlock, theta, spec: ModelSpec) -> ScoreMatrix:
    theta = _vec(theta, spec)
    _, psi = evaluate(block, theta, spec)
    return ScoreMatrix(psi, theta.copy(), block.path)


def score(block: DataBlock, theta, spec: ModelSpec) -> np.ndarray:
    return exact_sum(per_observation_scores(block, theta, spec).values)


def sensitivity_block(scores) -> np.ndarray:
    """Bartlett estimate ``sum_i psi_i psi_i'`` of the negative score Jacobian."""
    values = scores.values if isinstance(scores, ScoreMatrix) else np.asarray(scores)
    return values.T @ values


# ---------------------------------------------------------------------------
# maximum likelihood
# ---------------------------------------------------------------------------


def initial_theta(block: DataBlock, spec: ModelSpec) -> np.ndarray:
    """Moment-based starting point.

    Mean coefficients by least squares on row means, total residual variance
    split 80/20 between the spatial variance and the nugget, range from the
    median within-ROI squared distance.
    """
    _check_block(block, spec)
    block = block.canonical()[1]
    theta = np.zeros(spec.p)
    ybar = block.Y.mean(axis=1)
    if spec.mean_kind == "constant-intercept":
        theta[0] = exact_sum(ybar) / block.N
    else:
        X = block.X
        XtX = np.array([[math.fsum(X[:, a] * X[:, b]) for b in range(spec.q)] for a in range(spec.q)])
        Xty = exact_sum(X * ybar[:, None])
        theta[spec.beta_slice] = np.linalg.lstsq(XtX, Xty, rcond=None)[0]
    resid = block.Y - (mean_design(spec, block.X) @ theta[spec.beta_slice])[:, None]
    v = float(exact_sum((resid**2).ravel())) / resid.size
    if not np.isfinite(v) or v <= 1e-300:
        raise NonConvergenceError("degenerate block: zero residual variance", best=theta, iterations=0)
    h = sq_distances(block.coords)
    iu = np.triu_indices(block.S, k=1)
    same = (block.roi[:, None] == block.roi[None, :])[iu]
    hh = h[iu][same] if same.any() else h[iu]
    med = float(np.median(hh)) if hh.size else 1.0
    theta[spec.tau_slice] = math.log(0.8 * v)
    if spec.stationary:
        theta[spec.q1 + 1] = -math.log(med)
    else:
        for r in range(1, spec.roi_count + 1):
            theta[spec.rho_slice(r).start] = math.log(med)
    theta[-1] = math.log(0.2 * v)
    return theta


def _warm_start(block: DataBlock, spec: ModelSpec, opts: FitOptions) -> np.ndarray:
    """Starting point for covariate-dependent ranges.

    Fits the same kernel with intercept-only range coefficients (a single
    covariance for every row, so each evaluation costs one factorization) to
    the moment-centred data, then embeds it with zero slopes.
    """
    theta = initial_theta(block, spec)
    if spec.stationary or spec.q == 1 or not np.all(block.X[:, 0] == 1.0):
        return theta
    mu = mean_design(spec, block.X) @ theta[spec.beta_slice]
    sub_spec = ModelSpec("constant-intercept", spec.cov_kind, 1, spec.roi_count, spec.tau_structure)
    sub = DataBlock(block.Y - mu[:, None], np.ones((block.N, 1)), block.coords, block.roi, block.path)
    try:
        fit = fit_local_mle(sub, sub_spec, opts=opts)
    except (NonConvergenceError, NonPositiveDefiniteError):
        return theta
    theta[0] += fit.theta[0]
    theta[spec.tau_slice] = fit.theta[sub_spec.tau_slice]
    for r in range(1, spec.roi_count + 1):
        theta[spec.rho_slice(r)] = 0.0
        theta[spec.rho_slice(r).start] = fit.theta[sub_spec.rho_slice(r).start]
    theta[-1] = fit.theta[-1]
    return theta


def _safe_eval(block, x, spec):
    try:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore", under="ignore"):
            ll, psi = evaluate(block, x, spec)
    except NonPositiveDefiniteError:
        return math.inf, None, None
    if not np.all(np.isfinite(ll)) or not np.all(np.isfinite(psi)):
        return math.inf, None, None
    return -float(exact_sum(ll)), -exact_sum(psi), psi


def _bhhh_inverse(psi: np.ndarray) -> np.ndarray:
    p = psi.shape[1]
    B = np.empty((p, p))
    for a in range(p):
        for b in range(a, p):
            B[a, b] = B[b, a] = math.fsum(psi[:, a] * psi[:, b])
    B += 1e-10 * max(np.trace(B) / B.shape[0], 1e-300) * np.eye(B.shape[0])
    return np.linalg.inv(B)


def fit_local_mle(block: DataBlock, spec: ModelSpec, init=None, opts: FitOptions | None = None) -> MetaEstimate:
    """Maximize the block log-likelihood by BFGS with Armijo backtracking.

    Without ``init`` the start is :func:`initial_theta`, refined for
    covariate-dependent ranges by :func:`_warm_start`.  The inverse-Hessian
    approximation starts from the outer product of the per-observation
    scores at the initial point.  Converged when
    ``max|grad| <= tol * max(1, |loglik|)``; failures raise
    :class:`NonConvergenceError` carrying the best iterate.
    """
    opts = opts or FitOptions()
    x = _warm_start(block, spec, opts) if init is None else _vec(init, spec).copy()
    if not np.all(np.isfinite(x)):
        raise NonConvergenceError("non-finite initial value", best=x, iterations=0)
    variance_idx = [*range(spec.tau_slice.start, spec.tau_slice.stop), spec.p - 1]
    if spec.stationary:
        variance_idx.append(spec.q1 + 1)

    f, g, psi = _safe_eval(block, x, spec)
    if psi is None:
        raise NonConvergenceError("covariance not positive definite at the initial value", best=x)
    H = _bhhh_inverse(psi)
    it = 0
    n_evals = 1
    stop = None
    while True:
        if np.max(np.abs(g)) <= opts.tol * max(1.0, abs(f)):
            stop = "gradient"
            break
        if it >= opts.max_iter:
            raise NonConvergenceError(
                f"no convergence in {opts.max_iter} iterations at node {block.path}", best=x, iterations=it
            )
        step = -H @ g
        slope = float(g @ step)
        if not slope < 0:
            H = _bhhh_inverse(psi)
            step = -H @ g
            slope = float(g @ step)
        big = np.max(np.abs(step))
        t = min(1.0, opts.max_step / big) if big > 0 else 1.0
        accepted = False
        for _ in range(60):
            xn = x + t * step
            fn, gn, psin = _safe_eval(block, xn, spec)
            n_evals += 1
            if psin is not None and fn <= f + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if -slope <= 1e-9 * max(1.0, abs(f)):
                stop = "precision"
                break
            raise NonConvergenceError(f"line search failed at node {block.path}", best=x, iterations=it)
        s = xn - x
        y = gn - g
        x, f, g, psi = xn, fn, gn, psin
        it += 1
        if np.any(np.abs(x[variance_idx]) > opts.boundary):
            raise NonConvergenceError(
                f"variance parameter ran to the boundary at node {block.path}", best=x, iterations=it
            )
        if np.max(np.abs(s)) < opts.step_tol:
            stop = "step"
            break
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            rho = 1.0 / sy
            Hy = H @ y
            H = H + ((sy + y @ Hy) * rho**2) * np.outer(s, s) - rho * (np.outer(Hy, s) + np.outer(s, Hy))

    scores = ScoreMatrix(psi, x.copy(), block.path)
    return MetaEstimate(
        theta=x,
        J=sensitivity_block(scores),
        path=block.path,
        method="leaf-mle",
        names=spec.param_names,
        counters={"leaf_fits": 1, "score_evals": 1},
        diagnostics={"iterations": it, "evaluations": n_evals, "loglik": -f, "stop": stop},
        scores=scores,
    )
