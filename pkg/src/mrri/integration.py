"""Combining child estimates across resolutions.

Every node of the partition receives one ``N x p`` score block per child,
stacks them into an ``N x pK`` matrix and forms

* ``V = sum_i row_i row_i'`` (variability of the stacked scores),
* ``S = [S_1, ..., S_K]`` with ``S_k = sum_i psi_ik psi_ik'`` (Bartlett),
* ``J = S V^-1 S'`` and ``theta = J^-1 S V^-1 T``, ``T_k = S_k' theta_k``.

The node's own score block for its parent is the projection
``-stacked V^-1 S'``.  All matrices are on the sum-over-observations
scale, so ``J^-1`` estimates the covariance of the node estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import least_squares

from .errors import ConditioningError, DimensionError, NonConvergenceError, SingularVariabilityError
from .estimates import MetaEstimate
from .likelihood import FitOptions, ScoreMatrix, sensitivity_block

Path = tuple


@dataclass
class RidgePolicy:
    """Diagonal loading ``eps * tr(V) / dim`` tried from 1e-10 up to ``max_eps``.

    ``V`` is accepted without loading when its correlation-scaled Cholesky
    factor has ``(min diag / max diag)^2 >= min_ratio``.
    """

    max_eps: float = 1e-6
    min_ratio: float = 1e-12

    @property
    def levels(self) -> list[float]:
        out, eps = [], 1e-10
        while eps <= self.max_eps * (1 + 1e-9):
            out.append(eps)
            eps *= 100.0
        return out


@dataclass
class IntegrationOptions:
    fit: FitOptions = field(default_factory=FitOptions)
    ridge: RidgePolicy = field(default_factory=RidgePolicy)
    workers: int = 1
    spill_dir: str | None = None


@dataclass
class StackedScores:
    """Child score blocks side by side, in child-index order."""

    values: np.ndarray
    child_paths: list
    theta_at: list

    @property
    def K(self) -> int:
        return len(self.child_paths)

    @property
    def p(self) -> int:
        return self.values.shape[1] // max(self.K, 1)

    @classmethod
    def from_children(cls, children: Sequence[ScoreMatrix]) -> "StackedScores":
        if not children:
            raise DimensionError("no child score blocks")
        n = {c.N for c in children}
        p = {c.p for c in children}
        if len(n) != 1 or len(p) != 1:
            raise DimensionError("child score blocks must share N and p")
        return cls(
            np.hstack([c.values for c in children]),
            [c.path for c in children],
            [np.asarray(c.theta_at) for c in children],
        )

    def block(self, k: int) -> np.ndarray:
        p = self.p
        return self.values[:, k * p : (k + 1) * p]


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def _well_conditioned(V: np.ndarray, min_ratio: float):
    d = np.diag(V)
    if np.any(d <= 0) or not np.all(np.isfinite(V)):
        return None
    scale = 1.0 / np.sqrt(d)
    R = V * scale[:, None] * scale[None, :]
    try:
        L = np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        return None
    ld = np.diag(L)
    if (ld.min() / ld.max()) ** 2 < min_ratio:
        return None
    return cho_factor(V, lower=True)


def factor_variability(V: np.ndarray, policy: RidgePolicy | None = None):
    """Cholesky factor of ``V`` after the ridge policy; returns ``(factor, V_used, eps)``."""
    policy = policy or RidgePolicy()
    V = 0.5 * (V + V.T)
    f = _well_conditioned(V, policy.min_ratio)
    if f is not None:
        return f, V, 0.0
    load = np.trace(V) / V.shape[0]
    if not np.isfinite(load) or load <= 0:
        raise SingularVariabilityError("variability matrix has no positive diagonal mass")
    for eps in policy.levels:
        Vr = V + eps * load * np.eye(V.shape[0])
        f = _well_conditioned(Vr, policy.min_ratio)
        if f is not None:
            return f, Vr, eps
    raise SingularVariabilityError(
        f"variability matrix singular after ridge up to {policy.max_eps:g}"
    )


def variability(stacked, ridge_policy: RidgePolicy | None = None):
    """``sum_i row_i row_i'`` of the stacked scores, ridged if needed.

    Returns ``(V, eps)`` with ``eps`` the applied ridge level (0 for none).
    """
    values = stacked.values if isinstance(stacked, StackedScores) else np.asarray(stacked)
    if values.shape[0] < values.shape[1]:
        import warnings

        warnings.warn(
            f"N={values.shape[0]} is smaller than the stacked width {values.shape[1]}",
            RuntimeWarning,
            stacklevel=2,
        )
    V = values.T @ values
    _, V_used, eps = factor_variability(V, ridge_policy)
    return V_used, eps


def stacked_sensitivity(children) -> np.ndarray:
    """``[S_1, ..., S_K]`` from child score blocks (Bartlett estimates)."""
    if isinstance(children, StackedScores):
        blocks = [children.block(k) for k in range(children.K)]
    else:
        blocks = [c.values if isinstance(c, ScoreMatrix) else np.asarray(c) for c in children]
    return np.hstack([sensitivity_block(b) for b in blocks])


def _theta_vec(t) -> np.ndarray:
    return np.asarray(getattr(t, "vector", t), dtype=np.float64).reshape(-1)


def meta_estimator(
    S: np.ndarray,
    V,
    child_estimates: Sequence,
    *,
    path: Path = (),
    ridge_eps: float = 0.0,
    names: Sequence[str] = (),
) -> MetaEstimate:
    """Closed-form combination ``J^-1 S V^-1 T`` of child estimates.

    ``V`` may be a matrix or a Cholesky factor from :func:`factor_variability`.
    """
    p, pK = S.shape
    K = len(child_estimates)
    if pK != p * K:
        raise DimensionError(f"S is {p}x{pK} but {K} child estimates were given")
    factor = V if isinstance(V, tuple) else cho_factor(0.5 * (V + V.T), lower=True)
    T = np.concatenate(
        [S[:, k * p : (k + 1) * p].T @ _theta_vec(t) for k, t in enumerate(child_estimates)]
    )
    W = cho_solve(factor, S.T)  # V^-1 S'
    J = S @ W
    J = 0.5 * (J + J.T)
    try:
        Jf = cho_factor(J, lower=True)
    except np.linalg.LinAlgError:
        raise ConditioningError(f"J at node {path} is not positive definite") from None
    theta = cho_solve(Jf, W.T @ T)
    return MetaEstimate(theta=theta, J=J, path=path, method="meta", names=names, ridge_eps=ridge_eps)


def weighted_scores(S: np.ndarray, V, stacked) -> np.ndarray:
    """Project stacked rows to width ``p``: ``psi_i -> -S V^-1 psi_i``."""
    values = stacked.values if isinstance(stacked, StackedScores) else np.asarray(stacked)
    factor = V if isinstance(V, tuple) else cho_factor(0.5 * (V + V.T), lower=True)
    return -values @ cho_solve(factor, S.T)


# ---------------------------------------------------------------------------
# node reduction
# ---------------------------------------------------------------------------


@dataclass
class NodeResult:
    estimate: MetaEstimate
    projected: ScoreMatrix  # width-p block for the parent, evaluated where the children were


def reduce_node(
    path: Path,
    child_blocks: Sequence[ScoreMatrix],
    child_thetas: Sequence,
    policy: RidgePolicy | None = None,
    names: Sequence[str] = (),
) -> NodeResult:
    """Integrate one node from its children's score blocks and estimates."""
    stacked = StackedScores.from_children(child_blocks)
    S = stacked_sensitivity(stacked)
    factor, _, eps = factor_variability(stacked.values.T @ stacked.values, policy)
    est = meta_estimator(S, factor, child_thetas, path=path, ridge_eps=eps, names=names)
    proj = weighted_scores(S, factor, stacked)
    return NodeResult(est, ScoreMatrix(proj, est.theta.copy(), path))


def project_subtree(tree, path: Path, leaf_scores: dict, policy: RidgePolicy | None = None) -> ScoreMatrix:
    """Width-p score block of node ``path`` built from the supplied leaf scores.

    Leaf blocks under ``path`` are projected upward through every
    intermediate node using that node's own ``S`` and ``V``.
    """
    if tree.is_leaf(path):
        return leaf_scores[path]
    kids = [project_subtree(tree, c, leaf_scores, policy) for c in tree.children(path)]
    stacked = StackedScores.from_children(kids)
    S = stacked_sensitivity(stacked)
    factor, _, _ = factor_variability(stacked.values.T @ stacked.values, policy)
    return ScoreMatrix(weighted_scores(S, factor, stacked), kids[0].theta_at, path)


# ---------------------------------------------------------------------------
# public integrators
# ---------------------------------------------------------------------------


def recursive_integrate(tree, data, spec, opts: IntegrationOptions | None = None, nodes: dict | None = None,
                        leaf_fits: dict | None = None) -> MetaEstimate:
    """Root estimate with weights re-evaluated at every resolution.

    ``nodes``, if given, is filled with every node's :class:`MetaEstimate`.
    ``leaf_fits`` may carry precomputed leaf MLEs keyed by path.
    """
    from .runtime import execute, plan

    opts = opts or IntegrationOptions()
    return execute(plan(tree, "recursive", opts.workers), data, spec, opts, nodes=nodes, leaf_fits=leaf_fits)


def sequential_integrate(tree, data, spec, opts: IntegrationOptions | None = None, nodes: dict | None = None,
                         leaf_fits: dict | None = None) -> MetaEstimate:
    """Root estimate from a single upward pass with weights fixed at the leaf MLEs."""
    from .runtime import execute, plan

    opts = opts or IntegrationOptions()
    return execute(plan(tree, "sequential", opts.workers), data, spec, opts, nodes=nodes, leaf_fits=leaf_fits)


def gmm_objective(theta, producer: Callable[[np.ndarray], np.ndarray], V) -> float:
    factor = V if isinstance(V, tuple) else cho_factor(0.5 * (V + V.T), lower=True)
    psi = np.asarray(producer(np.asarray(theta, dtype=np.float64))).sum(axis=0)
    return float(psi @ cho_solve(factor, psi))


def gmm_oracle(producer: Callable[[np.ndarray], np.ndarray], V, init, *, xtol: float = 1e-14) -> np.ndarray:
    """Minimize ``Psi(theta)' V^-1 Psi(theta)`` with ``V`` held fixed.

    ``producer(theta)`` returns the ``N x pK`` stacked scores at a common
    ``theta``.  Validation tool for small problems.
    """
    V = 0.5 * (np.asarray(V) + np.asarray(V).T)
    L = np.linalg.cholesky(V)

    def resid(theta):
        psi = np.asarray(producer(theta)).sum(axis=0)
        return np.linalg.solve(L, psi)

    x0 = _theta_vec(init)
    sol = least_squares(resid, x0, method="lm", xtol=xtol, ftol=1e-15, gtol=1e-15, x_scale="jac", max_nfev=2000)
    if not sol.success and sol.status <= 0:
        raise NonConvergenceError(f"GMM minimization failed: {sol.message}", best=sol.x, iterations=sol.nfev)
    return sol.x
