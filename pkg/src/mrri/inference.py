"""Wald intervals, contrast tests and agreement metrics for estimates.

The normal CDF is computed as ``0.5 * erfc(-x / sqrt(2))`` with
:func:`math.erfc`, which is accurate to a few ulp over the whole real line
(including the tails, where ``1 - Phi`` would cancel).  Quantiles come from
:class:`statistics.NormalDist`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from statistics import NormalDist

import numpy as np

from .errors import ConditioningError, DimensionError
from .estimates import MetaEstimate

_SQRT2 = math.sqrt(2.0)
_STD = NormalDist()


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / _SQRT2)


def two_sided_p(z: float) -> float:
    """``2 * (1 - Phi(|z|))`` evaluated without cancellation."""
    return math.erfc(abs(z) / _SQRT2)


def normal_quantile(u: float) -> float:
    return _STD.inv_cdf(u)


@dataclass
class TestResult:
    statistic: float
    p_value: float
    null_value: float
    contrast: dict

    __test__ = False  # not a pytest class

    def reject(self, level: float = 0.05) -> bool:
        return self.p_value < level

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _component(est: MetaEstimate, q: int) -> int:
    if not -est.p <= q < est.p:
        raise IndexError(f"component {q} out of range for p={est.p}")
    return q % est.p


def wald_interval(est: MetaEstimate, component: int, level: float = 0.95) -> tuple[float, float]:
    """``theta_q +/- z_{(1+level)/2} * sqrt((J^-1)_qq)``."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    q = _component(est, component)
    z = normal_quantile(0.5 * (1.0 + level))
    half = z * math.sqrt(est.cov[q, q])
    return float(est.theta[q] - half), float(est.theta[q] + half)


def z_contrast(est: MetaEstimate, q1: int, q2: int, rho0: float = 0.0) -> TestResult:
    """Two-sided Z test of ``theta_q1 - theta_q2 = rho0``."""
    a, b = _component(est, q1), _component(est, q2)
    if a == b:
        raise ValueError("contrast needs two distinct components")
    cov = est.cov
    var = cov[a, a] + cov[b, b] - 2.0 * cov[a, b]
    if not var > 0:
        raise ConditioningError(f"contrast variance {var:g} is not positive")
    z = (est.theta[a] - est.theta[b] - rho0) / math.sqrt(var)
    names = list(est.names) or [f"theta[{k}]" for k in range(est.p)]
    return TestResult(
        statistic=float(z),
        p_value=two_sided_p(z),
        null_value=float(rho0),
        contrast={"q1": a, "q2": b, "name1": names[a], "name2": names[b], "description": f"{names[a]} - {names[b]}"},
    )


def standardized(est: MetaEstimate) -> np.ndarray:
    return est.theta / est.se


def cosine_agreement(est_a: MetaEstimate, est_b: MetaEstimate) -> float:
    """Cosine of the angle between the two ``theta / se`` vectors."""
    if est_a.p != est_b.p:
        raise DimensionError("estimates have different layouts")
    u, v = standardized(est_a), standardized(est_b)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine agreement undefined for a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def two_sample_z(est_a: MetaEstimate, est_b: MetaEstimate, component: int) -> float:
    """Z statistic for one component compared between independent fits."""
    q = _component(est_a, component)
    diff = est_a.theta[q] - est_b.theta[q]
    return float(diff / math.sqrt(est_a.cov[q, q] + est_b.cov[q, q]))


def calibrated_critical_value(z_values, quantile: float = 0.05) -> dict:
    """Data-driven critical value from |Z| statistics of null comparisons.

    Takes the ``quantile`` of the two-sided p-values of ``z_values`` as the
    effective type-I threshold and returns the matching |Z| cut-off.
    """
    z = np.abs(np.asarray(z_values, dtype=np.float64).reshape(-1))
    if z.size == 0:
        raise ValueError("need at least one statistic")
    p = np.array([two_sided_p(v) for v in z])
    p_q = float(np.quantile(p, quantile))
    crit = math.inf if p_q <= 0 else -normal_quantile(p_q / 2.0)
    return {"p_threshold": p_q, "critical_value": float(crit), "n": int(z.size)}
