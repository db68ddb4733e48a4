"""Parameter layout, mean functions and covariance kernels.

Two kernel families are supported:

* ``stationary-gaussian``: ``tau2 * exp(-rho2 * |s - s'|^2)``.
* ``nonstationary-ps``: the Paciorek-Schervish style kernel whose squared
  range at location ``s_j`` for observation ``i`` is
  ``rho_ij = exp(X_i . rho(s_j))``, with ``rho(s_j)`` the coefficient vector
  of the ROI that contains ``s_j``.

Every parameter vector is laid out as ``(beta, gamma, log_sigma2)``;
variance-type parameters live on the log scale, ROI range coefficients are
unconstrained.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain import Location
from .errors import DimensionError, NonPositiveDefiniteError

LAYOUT_VERSION = 1

MEAN_KINDS = ("constant-intercept", "linear-in-X")
COV_KINDS = ("stationary-gaussian", "nonstationary-ps")
TAU_STRUCTURES = ("single-tau2", "per-roi-tau2")

JITTER_LEVELS = (1e-10, 1e-8, 1e-6)


@dataclass(frozen=True)
class ModelSpec:
    mean_kind: str = "linear-in-X"
    cov_kind: str = "stationary-gaussian"
    q: int = 3
    roi_count: int = 1
    tau_structure: str = "single-tau2"

    def __post_init__(self):
        if self.mean_kind not in MEAN_KINDS:
            raise ValueError(f"unknown mean_kind {self.mean_kind!r}")
        if self.cov_kind not in COV_KINDS:
            raise ValueError(f"unknown cov_kind {self.cov_kind!r}")
        if self.tau_structure not in TAU_STRUCTURES:
            raise ValueError(f"unknown tau_structure {self.tau_structure!r}")
        if self.q < 1 or self.roi_count < 1:
            raise ValueError("q and roi_count must be positive")
        if self.cov_kind == "stationary-gaussian" and (
            self.roi_count != 1 or self.tau_structure != "single-tau2"
        ):
            raise ValueError("stationary-gaussian requires roi_count=1 and single-tau2")

    # -- layout -------------------------------------------------------------

    @property
    def stationary(self) -> bool:
        return self.cov_kind == "stationary-gaussian"

    @property
    def q1(self) -> int:
        return self.q if self.mean_kind == "linear-in-X" else 1

    @property
    def n_tau(self) -> int:
        return self.roi_count if self.tau_structure == "per-roi-tau2" else 1

    @property
    def q2(self) -> int:
        if self.stationary:
            return 2
        return self.n_tau + self.roi_count * self.q

    @property
    def p(self) -> int:
        return self.q1 + self.q2 + 1

    @property
    def beta_slice(self) -> slice:
        return slice(0, self.q1)

    @property
    def gamma_slice(self) -> slice:
        return slice(self.q1, self.q1 + self.q2)

    @property
    def tau_slice(self) -> slice:
        return slice(self.q1, self.q1 + self.n_tau)

    def rho_slice(self, roi: int) -> slice:
        """Coefficients of ROI ``roi`` (1-based) in the full vector."""
        if self.stationary:
            raise ValueError("stationary kernels have no ROI coefficients")
        if not 1 <= roi <= self.roi_count:
            raise IndexError(f"ROI {roi} out of range 1..{self.roi_count}")
        start = self.q1 + self.n_tau + (roi - 1) * self.q
        return slice(start, start + self.q)

    @property
    def sigma_index(self) -> int:
        return self.p - 1

    @property
    def param_names(self) -> tuple[str, ...]:
        if self.mean_kind == "linear-in-X":
            names = [f"beta[{k}]" for k in range(self.q)]
        else:
            names = ["beta"]
        if self.stationary:
            names += ["log_tau2", "log_rho2"]
        else:
            if self.n_tau == 1:
                names.append("log_tau2")
            else:
                names += [f"log_tau2[{r}]" for r in range(1, self.n_tau + 1)]
            for r in range(1, self.roi_count + 1):
                names += [f"rho{r}[{k}]" for k in range(self.q)]
        names.append("log_sigma2")
        return tuple(names)

    def to_dict(self) -> dict:
        return {
            "layout_version": LAYOUT_VERSION,
            "mean_kind": self.mean_kind,
            "cov_kind": self.cov_kind,
            "q": self.q,
            "roi_count": self.roi_count,
            "tau_structure": self.tau_structure,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        version = data.get("layout_version", LAYOUT_VERSION)
        if version != LAYOUT_VERSION:
            raise ValueError(f"unsupported layout version {version}")
        return cls(
            mean_kind=data["mean_kind"],
            cov_kind=data["cov_kind"],
            q=int(data["q"]),
            roi_count=int(data.get("roi_count", 1)),
            tau_structure=data.get("tau_structure", "single-tau2"),
        )


@dataclass(frozen=True)
class ThetaParams:
    """Full parameter ``(beta, gamma, log_sigma2)`` on the unconstrained scale."""

    beta: np.ndarray
    gamma: np.ndarray
    log_sigma2: float

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=np.float64)))
        object.__setattr__(self, "gamma", np.atleast_1d(np.asarray(self.gamma, dtype=np.float64)))
        object.__setattr__(self, "log_sigma2", float(self.log_sigma2))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.beta, self.gamma, [self.log_sigma2]])

    @property
    def p(self) -> int:
        return self.beta.size + self.gamma.size + 1

    @classmethod
    def from_vector(cls, vec, spec: ModelSpec) -> "ThetaParams":
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.size != spec.p:
            raise DimensionError(f"expected {spec.p} parameters, got {vec.size}")
        return cls(vec[spec.beta_slice].copy(), vec[spec.gamma_slice].copy(), vec[-1])

    def to_dict(self, spec: ModelSpec) -> dict:
        return {
            "layout_version": LAYOUT_VERSION,
            "names": list(spec.param_names),
            "values": self.vector.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict, spec: ModelSpec) -> "ThetaParams":
        if data.get("layout_version", LAYOUT_VERSION) != LAYOUT_VERSION:
            raise ValueError("unsupported layout version")
        if "names" in data and tuple(data["names"]) != spec.param_names:
            raise DimensionError("parameter names do not match the model layout")
        return cls.from_vector(data["values"], spec)

    def to_json(self, spec: ModelSpec) -> str:
        return json.dumps(self.to_dict(spec))


# ---------------------------------------------------------------------------
# mean
# ---------------------------------------------------------------------------


def mean_value(spec: ModelSpec, X_i, beta) -> float:
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    if beta.size != spec.q1:
        raise DimensionError(f"beta has {beta.size} entries, layout needs {spec.q1}")
    if spec.mean_kind == "constant-intercept":
        return float(beta[0])
    x = np.atleast_1d(np.asarray(X_i, dtype=np.float64))
    if x.size != spec.q:
        raise DimensionError(f"covariate vector has {x.size} entries, expected {spec.q}")
    return float(x @ beta)


def mean_design(spec: ModelSpec, X: np.ndarray) -> np.ndarray:
    """(N, q1) matrix whose rows give d mu_i / d beta (same at every location)."""
    if spec.mean_kind == "constant-intercept":
        return np.ones((X.shape[0], 1))
    return X


# ---------------------------------------------------------------------------
# kernels, pointwise
# ---------------------------------------------------------------------------


def _coords(s) -> np.ndarray:
    if isinstance(s, Location):
        return np.asarray(s.coords, dtype=np.float64)
    return np.atleast_1d(np.asarray(s, dtype=np.float64))


def _roi(s) -> int:
    if isinstance(s, Location) and s.roi is not None:
        return int(s.roi)
    return 1


def cov_stationary(s_j, s_k, tau2: float, rho2: float) -> float:
    a, b = _coords(s_j), _coords(s_k)
    if a.shape != b.shape:
        raise DimensionError("locations have different dimensions")
    diff = b - a
    return float(tau2 * math.exp(-rho2 * float(diff @ diff)))


def tau2_by_roi(gamma, spec: ModelSpec) -> np.ndarray:
    """Variance ``tau_r^2`` for each ROI r = 1..roi_count."""
    gamma = np.asarray(gamma, dtype=np.float64)
    log_tau2 = gamma[: spec.n_tau]
    if spec.n_tau == 1:
        log_tau2 = np.repeat(log_tau2, spec.roi_count)
    return np.exp(log_tau2)


def rho_coefficients(gamma, spec: ModelSpec) -> np.ndarray:
    """(roi_count, q) matrix of ROI range coefficients."""
    gamma = np.asarray(gamma, dtype=np.float64)
    return gamma[spec.n_tau :].reshape(spec.roi_count, spec.q)


def cov_nonstationary(s_j, s_k, X_i, gamma, spec: ModelSpec) -> float:
    a, b = _coords(s_j), _coords(s_k)
    if a.shape != b.shape:
        raise DimensionError("locations have different dimensions")
    x = np.atleast_1d(np.asarray(X_i, dtype=np.float64))
    if x.size != spec.q:
        raise DimensionError(f"covariate vector has {x.size} entries, expected {spec.q}")
    d = a.size
    rj_roi, rk_roi = _roi(s_j), _roi(s_k)
    if not (1 <= rj_roi <= spec.roi_count and 1 <= rk_roi <= spec.roi_count):
        raise IndexError("location ROI label outside the model's ROI range")
    coef = rho_coefficients(gamma, spec)
    tau2 = tau2_by_roi(gamma, spec)
    r_j = math.exp(float(x @ coef[rj_roi - 1]))
    r_k = math.exp(float(x @ coef[rk_roi - 1]))
    tau = math.sqrt(tau2[rj_roi - 1] * tau2[rk_roi - 1])
    diff = b - a
    s = r_j + r_k
    return float(
        2 ** (d / 2) * tau * (r_j * r_k / s**2) ** (d / 4) * math.exp(-2.0 * float(diff @ diff) / s)
    )


# ---------------------------------------------------------------------------
# kernels, matrix form
# ---------------------------------------------------------------------------


def sq_distances(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def stationary_kernel(h: np.ndarray, theta: np.ndarray, spec: ModelSpec) -> np.ndarray:
    g = theta[spec.gamma_slice]
    return np.exp(g[0] - np.exp(g[1]) * h)


def nonstationary_kernel(
    h: np.ndarray,
    roi_idx: np.ndarray,
    X: np.ndarray,
    theta: np.ndarray,
    spec: ModelSpec,
    d: int,
    derivative: bool = False,
):
    """Kernel blocks for a batch of covariate rows.

    ``roi_idx`` holds 0-based ROI indices per location and ``X`` is (G, q).
    Returns ``K`` of shape (G, S, S) and, with ``derivative``, also ``D``
    where ``D[g, j, k] = dK[g, j, k] / d log rho_gj`` (only the row location's
    range varies).
    """
    g = theta[spec.gamma_slice]
    coef = rho_coefficients(g, spec)
    log_tau2 = np.log(tau2_by_roi(g, spec))[roi_idx]
    logr = X @ coef[roi_idx].T  # (G, S)
    r = np.exp(logr)
    # K = 2^(d/2) a_j a_k s^(-d/2) exp(-2h/s),  a_j = tau_j r_j^(d/4),  s = r_j + r_k
    a = np.exp(0.5 * log_tau2 + 0.25 * d * logr) * 2.0 ** (0.25 * d)
    inv_s = np.add(r[:, :, None], r[:, None, :])
    np.reciprocal(inv_s, out=inv_s)
    K = np.multiply(inv_s, -2.0 * h)
    np.exp(K, out=K)
    K *= inv_s if d == 2 else inv_s ** (0.5 * d)
    K *= a[:, :, None] * a[:, None, :]  # one product per entry keeps K exactly symmetric
    if not derivative:
        return K
    # dK_jk / d log r_j = K (d/4 (r_k - r_j) / s + 2 h r_j / s^2)
    D = np.subtract(r[:, None, :], r[:, :, None])
    D *= 0.25 * d
    T = np.multiply(inv_s, 2.0 * h)
    T *= r[:, :, None]
    D += T
    D *= inv_s
    D *= K
    return K, D


def cholesky_jittered(C: np.ndarray, levels: Sequence[float] = JITTER_LEVELS):
    """Cholesky factor of ``C`` (or a stack of them) with jitter escalation.

    Returns ``(L, added)`` where ``added`` is the absolute amount put on the
    diagonal (0.0 when none was needed).
    """
    if not np.all(np.isfinite(C)):
        raise NonPositiveDefiniteError("covariance has non-finite entries", ())
    try:
        return np.linalg.cholesky(C), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diagonal(C, axis1=-2, axis2=-1)))
    eye = np.eye(C.shape[-1])
    for eps in levels:
        added = eps * scale
        try:
            return np.linalg.cholesky(C + added * eye), added
        except np.linalg.LinAlgError:
            continue
    raise NonPositiveDefiniteError(
        f"covariance not positive definite after jitter levels {tuple(levels)}", levels
    )


def _as_coords_roi(locations) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(locations, "coords") and isinstance(getattr(locations, "coords"), np.ndarray):
        coords = locations.coords
        roi = getattr(locations, "roi_labels", None)
        if roi is None:
            roi = getattr(locations, "roi", None)
        roi = np.ones(coords.shape[0], dtype=np.int64) if roi is None else np.asarray(roi)
        return coords, roi
    locs = list(locations)
    if not locs:
        raise DimensionError("empty location list")
    coords = np.array([_coords(s) for s in locs], dtype=np.float64)
    roi = np.array([_roi(s) for s in locs], dtype=np.int64)
    return coords, roi


def build_cov_matrix(locations, X_i, theta, spec: ModelSpec) -> np.ndarray:
    """Full covariance ``K + sigma^2 I`` for one covariate row.

    ``locations`` is a list of :class:`Location`, or any object with
    ``coords`` (and optionally ROI labels).  The matrix is checked with a
    Cholesky factorization; if jitter was needed the jittered matrix is
    returned.
    """
    theta = theta.vector if isinstance(theta, ThetaParams) else np.asarray(theta, dtype=np.float64)
    if theta.size != spec.p:
        raise DimensionError(f"expected {spec.p} parameters, got {theta.size}")
    coords, roi = _as_coords_roi(locations)
    h = sq_distances(coords)
    if spec.stationary:
        K = stationary_kernel(h, theta, spec)
    else:
        x = np.atleast_1d(np.asarray(X_i, dtype=np.float64))
        if x.size != spec.q:
            raise DimensionError(f"covariate vector has {x.size} entries, expected {spec.q}")
        if roi.max() > spec.roi_count:
            raise IndexError("location ROI label outside the model's ROI range")
        K = nonstationary_kernel(h, roi - 1, x[None, :], theta, spec, coords.shape[1])[0]
    C = K + np.exp(theta[-1]) * np.eye(coords.shape[0])
    _, added = cholesky_jittered(C)
    if added:
        C = C + added * np.eye(C.shape[0])
    return C


def implied_correlation_summary(theta, spec: ModelSpec, X_profile, roi_pair, *, d: int) -> dict:
    """Zero-distance amplitude and decay rate of the kernel between two ROIs.

    The covariance between ROI ``a`` and ROI ``b`` locations for the
    covariate profile is ``amplitude * exp(-decay_rate * |s - s'|^2)``.
    """
    if spec.stationary:
        raise ValueError("implied correlation summaries need a nonstationary-ps model")
    theta = theta.vector if isinstance(theta, ThetaParams) else np.asarray(theta, dtype=np.float64)
    a, b = roi_pair
    for r in (a, b):
        if not 1 <= r <= spec.roi_count:
            raise IndexError(f"ROI {r} out of range 1..{spec.roi_count}")
    g = theta[spec.gamma_slice]
    x = np.asarray(X_profile, dtype=np.float64)
    coef = rho_coefficients(g, spec)
    tau2 = tau2_by_roi(g, spec)
    r_a = math.exp(float(x @ coef[a - 1]))
    r_b = math.exp(float(x @ coef[b - 1]))
    s = r_a + r_b
    amplitude = 2 ** (d / 2) * math.sqrt(tau2[a - 1] * tau2[b - 1]) * (r_a * r_b / s**2) ** (d / 4)
    return {"amplitude": amplitude, "decay_rate": 2.0 / s}
