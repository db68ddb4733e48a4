"""Synthetic data under the simulation designs and the Monte Carlo harness.

Each replicate gets its own generator keyed by ``(seed, replicate_id)``
(Philox counter-based bit generator), so any subset of replicates can be
regenerated independently and results do not depend on how replicates are
spread over workers.
"""

from __future__ import annotations

import hashlib
import json
import math
import multiprocessing as mp
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .domain import SpatialDomain, build_partition, multi_roi_grid
from .errors import CapacityError, MRRIError
from .estimates import MetaEstimate
from .integration import IntegrationOptions, RidgePolicy, recursive_integrate, sequential_integrate
from .likelihood import FitOptions, fit_local_mle
from .model import ModelSpec, cholesky_jittered, nonstationary_kernel, sq_distances, stationary_kernel
from .runtime import Dataset

MAX_DENSE_S = 1600
ESTIMATORS = ("recursive", "sequential", "full-mle")
_CHOL_CHUNK = 2_000_000


@dataclass
class SimConfig:
    """One simulation design.

    ``boxes`` lists one integer grid box per ROI, each a list of
    ``(lo, hi)`` extents.  ``estimators`` picks which integrators run on
    every replicate; ``covariate_var`` is the variance of the non-intercept
    covariates, redrawn for every replicate.
    """

    name: str
    boxes: list
    spec: ModelSpec
    theta_true: tuple
    N: int
    replicates: int
    M: int
    branching: tuple
    seed: int = 20240101
    strategy: str = "coordinate-split"
    min_leaf_size: int = 25
    estimators: tuple = ("recursive", "sequential")
    covariate_var: float = 4.0
    fit: FitOptions = field(default_factory=FitOptions)
    ridge_max: float = 1e-6
    max_dense_S: int = MAX_DENSE_S

    def __post_init__(self):
        self.theta_true = tuple(float(v) for v in self.theta_true)
        self.branching = tuple(int(k) for k in self.branching)
        self.boxes = [[tuple(int(v) for v in ext) for ext in box] for box in self.boxes]
        if isinstance(self.estimators, str):
            self.estimators = ("recursive", "sequential") if self.estimators == "both" else (self.estimators,)
        self.estimators = tuple(self.estimators)
        for e in self.estimators:
            if e not in ESTIMATORS:
                raise ValueError(f"unknown estimator {e!r}")
        if len(self.theta_true) != self.spec.p:
            raise ValueError(f"theta_true has {len(self.theta_true)} entries, layout needs {self.spec.p}")

    @property
    def S(self) -> int:
        return sum(math.prod(hi - lo + 1 for lo, hi in box) for box in self.boxes)

    def domain(self) -> SpatialDomain:
        dom = multi_roi_grid(self.boxes)
        return dom if len(self.boxes) > 1 else SpatialDomain(dom.coords)

    def partition(self):
        return build_partition(self.domain(), self.M, self.branching, self.strategy, self.min_leaf_size)

    def integration_options(self, workers: int = 1) -> IntegrationOptions:
        return IntegrationOptions(fit=self.fit, ridge=RidgePolicy(max_eps=self.ridge_max), workers=workers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spec"] = self.spec.to_dict()
        d["fit"] = asdict(self.fit)
        d["boxes"] = [[list(e) for e in box] for box in self.boxes]
        d["branching"] = list(self.branching)
        d["theta_true"] = list(self.theta_true)
        d["estimators"] = list(self.estimators)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        data = dict(data)
        data["spec"] = ModelSpec.from_dict(data["spec"])
        if "fit" in data:
            data["fit"] = FitOptions(**data["fit"])
        return cls(**data)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_(self, **changes) -> "SimConfig":
        return replace(self, **changes)


_THETA_SIM1 = (0.3, 0.6, 0.8, math.log(3.0), math.log(0.5), math.log(1.6))
_THETA_SIM3 = (0.0, math.log(3.0), 0.5, 0.5, 0.5, 0.6, 0.6, 0.6, math.log(1.6))
_STAT = ModelSpec("linear-in-X", "stationary-gaussian", q=3)
_NS2 = ModelSpec("constant-intercept", "nonstationary-ps", q=3, roi_count=2, tau_structure="single-tau2")


def _presets() -> dict:
    return {
        "sim1": SimConfig("sim1", [[(1, 20), (1, 20)]], _STAT, _THETA_SIM1, 10000, 500, 3, (2, 2, 4)),
        "sim1-desk": SimConfig("sim1-desk", [[(1, 10), (1, 10)]], _STAT, _THETA_SIM1, 2000, 200, 2, (2, 2)),
        "sim2": SimConfig("sim2", [[(1, 160), (1, 160)]], _STAT, _THETA_SIM1, 5000, 500, 4, (4, 4, 4, 4)),
        "sim2-desk": SimConfig(
            "sim2-desk", [[(1, 32), (1, 32)]], _STAT, _THETA_SIM1, 1000, 100, 3, (4, 4, 4), min_leaf_size=16
        ),
        "sim3": SimConfig(
            "sim3", [[(1, 20), (1, 20)], [(21, 40), (21, 40)]], _NS2, _THETA_SIM3, 10000, 500, 3, (2, 2, 4),
            strategy="roi-balanced-coordinate-split", estimators=("sequential",), covariate_var=1.0,
        ),
        "sim3-desk": SimConfig(
            "sim3-desk", [[(1, 10), (1, 10)], [(11, 20), (11, 20)]], _NS2, _THETA_SIM3, 2000, 200, 2, (2, 2),
            strategy="roi-balanced-coordinate-split", estimators=("sequential",), covariate_var=1.0,
        ),
    }


PRESETS = tuple(_presets())


def preset(name: str, **overrides) -> SimConfig:
    table = _presets()
    if name not in table:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(table)}")
    return table[name].with_(**overrides) if overrides else table[name]


# ---------------------------------------------------------------------------
# data generation
# ---------------------------------------------------------------------------


def replicate_rng(seed: int, replicate_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(replicate_id)]))


def simulate_dataset(config: SimConfig, replicate_id: int) -> Dataset:
    """Draw ``(Y, X)`` for one replicate on the configured domain.

    Covariates are an intercept plus ``q - 1`` independent normal columns.
    Each row of ``Y`` is mean plus ``L z`` with ``L`` the Cholesky factor of
    that row's covariance (one factor overall for stationary kernels).
    """
    S = config.S
    if S > config.max_dense_S:
        raise CapacityError(
            f"{config.name}: S={S} exceeds the dense simulation cap {config.max_dense_S}; use a -desk preset"
        )
    spec = config.spec
    dom = config.domain()
    rng = replicate_rng(config.seed, replicate_id)
    N, q = config.N, spec.q
    X = np.ones((N, q))
    if q > 1:
        X[:, 1:] = rng.normal(0.0, math.sqrt(config.covariate_var), size=(N, q - 1))
    Z = rng.standard_normal((N, S))
    theta = np.asarray(config.theta_true)
    beta = theta[spec.beta_slice]
    mu = np.full(N, beta[0]) if spec.mean_kind == "constant-intercept" else X @ beta
    h = sq_distances(dom.coords)
    sig2 = math.exp(theta[-1])
    eye = np.eye(S)
    if spec.stationary:
        L, _ = cholesky_jittered(stationary_kernel(h, theta, spec) + sig2 * eye)
        E = Z @ L.T
    else:
        E = np.empty_like(Z)
        roi_idx = dom.roi_labels - 1
        step = max(1, _CHOL_CHUNK // (S * S))
        for lo in range(0, N, step):
            sl = slice(lo, min(N, lo + step))
            K = nonstationary_kernel(h, roi_idx, X[sl], theta, spec, dom.d)
            L, _ = cholesky_jittered(K + sig2 * eye)
            E[sl] = np.einsum("gjk,gk->gj", L, Z[sl])
    Y = mu[:, None] + E
    return Dataset(Y, X, dom.coords, dom.roi, {"config": config.name, "replicate_id": int(replicate_id)})


# ---------------------------------------------------------------------------
# Monte Carlo study
# ---------------------------------------------------------------------------


def _one_replicate(config: SimConfig, rid: int, tree) -> dict:
    t_rep = time.perf_counter()
    rec = {"replicate_id": rid, "estimates": {}, "elapsed": {}, "failures": {}}
    with threadpool_limits(limits=1):
        try:
            data = simulate_dataset(config, rid)
        except MRRIError as exc:
            for e in config.estimators:
                rec["failures"][e] = f"{type(exc).__name__}: {exc}"
            return rec
        opts = config.integration_options(workers=1)
        leaf_fits: dict = {}
        for e in config.estimators:
            t0 = time.perf_counter()
            try:
                if e == "recursive":
                    est = recursive_integrate(tree, data, config.spec, opts, leaf_fits=leaf_fits)
                elif e == "sequential":
                    est = sequential_integrate(tree, data, config.spec, opts, leaf_fits=leaf_fits)
                else:
                    block = data.block(np.arange(data.S), ())
                    est = fit_local_mle(block, config.spec, opts=config.fit)
                    est.scores = None
                rec["estimates"][e] = {"theta": est.theta.tolist(), "cov": est.cov.tolist(),
                                       "counters": dict(est.counters)}
            except MRRIError as exc:
                rec["failures"][e] = f"{type(exc).__name__}: {exc}"
            rec["elapsed"][e] = time.perf_counter() - t0
    rec["elapsed"]["replicate"] = time.perf_counter() - t_rep
    return rec


_STUDY: dict = {}


def _study_task(rid: int) -> dict:
    return _one_replicate(_STUDY["config"], rid, _STUDY["tree"])


def run_replicates(config: SimConfig, replicate_ids, workers: int = 1, progress=None) -> list[dict]:
    """Per-replicate records in replicate order."""
    tree = config.partition()
    ids = list(replicate_ids)
    _STUDY.update(config=config, tree=tree)
    out = []
    if workers <= 1:
        for rid in ids:
            out.append(_one_replicate(config, rid, tree))
            if progress:
                progress(out[-1])
        return out
    with ProcessPoolExecutor(max_workers=workers, mp_context=mp.get_context("fork")) as pool:
        for rec in pool.map(_study_task, ids):
            out.append(rec)
            if progress:
                progress(rec)
    return out


def run_study(config: SimConfig, workers: int = 1, progress=None) -> "MetricsTable":
    """Simulate, partition and integrate every replicate, then aggregate."""
    if config.replicates < 1:
        raise ValueError("a study needs at least one replicate")
    t0 = time.perf_counter()
    records = run_replicates(config, range(config.replicates), workers, progress)
    table = MetricsTable.from_records(config, records)
    table.wall_seconds = time.perf_counter() - t0
    return table


@dataclass
class MetricRow:
    name: str
    truth: float
    RMSE: float
    ESE: float
    ASE: float
    BIAS: float
    CP: float


@dataclass
class MetricsTable:
    config_name: str
    estimators: dict  # estimator -> list[MetricRow]
    timing: dict  # estimator -> {"mean", "sd"}
    failures: dict  # estimator -> count
    n_ok: dict
    records: list = field(default_factory=list, repr=False)
    config: dict = field(default_factory=dict, repr=False)
    wall_seconds: float = 0.0

    @staticmethod
    def metrics(thetas: np.ndarray, ses: np.ndarray, truth: np.ndarray, level: float = 0.95) -> dict:
        """Column-wise RMSE, ESE (ddof=1), ASE, BIAS and CP over replicates."""
        from .inference import normal_quantile

        z = normal_quantile(0.5 * (1 + level))
        err = thetas - truth
        R = thetas.shape[0]
        return {
            "RMSE": np.sqrt(np.mean(err**2, axis=0)),
            "ESE": np.std(thetas, axis=0, ddof=1) if R > 1 else np.full(thetas.shape[1], np.nan),
            "ASE": np.mean(ses, axis=0),
            "BIAS": np.mean(err, axis=0),
            "CP": np.mean(np.abs(err) <= z * ses, axis=0),
        }

    @classmethod
    def from_records(cls, config: SimConfig, records: list[dict]) -> "MetricsTable":
        names = config.spec.param_names
        truth = np.asarray(config.theta_true)
        rows, timing, failures, n_ok = {}, {}, {}, {}
        for e in config.estimators:
            ok = [r for r in records if e in r["estimates"]]
            failures[e] = sum(e in r["failures"] for r in records)
            n_ok[e] = len(ok)
            el = np.array([r["elapsed"][e] for r in records if e in r["elapsed"]])
            timing[e] = {
                "mean": float(el.mean()) if el.size else math.nan,
                "sd": float(el.std(ddof=1)) if el.size > 1 else math.nan,
            }
            if not ok:
                rows[e] = []
                continue
            th = np.array([r["estimates"][e]["theta"] for r in ok])
            se = np.sqrt(np.array([np.diag(r["estimates"][e]["cov"]) for r in ok]))
            m = cls.metrics(th, se, truth)
            rows[e] = [
                MetricRow(n, float(truth[k]), *(float(m[c][k]) for c in ("RMSE", "ESE", "ASE", "BIAS", "CP")))
                for k, n in enumerate(names)
            ]
        return cls(config.name, rows, timing, failures, n_ok, records, config.to_dict())

    def thetas(self, estimator: str) -> np.ndarray:
        return np.array([r["estimates"][estimator]["theta"] for r in self.records if estimator in r["estimates"]])

    def to_dict(self, include_records: bool = True) -> dict:
        out = {
            "config_name": self.config_name,
            "config": self.config,
            "metrics": {e: [asdict(r) for r in rows] for e, rows in self.estimators.items()},
            "timing": self.timing,
            "failures": self.failures,
            "n_ok": self.n_ok,
            "wall_seconds": self.wall_seconds,
        }
        if include_records:
            out["records"] = self.records
        return out

    def to_json(self, include_records: bool = True, **kw) -> str:
        return json.dumps(self.to_dict(include_records), **kw)

    def to_text(self) -> str:
        lines = []
        for e, rows in self.estimators.items():
            t = self.timing[e]
            lines.append(
                f"{self.config_name} / {e}: {self.n_ok[e]} ok, {self.failures[e]} failed, "
                f"time {t['mean']:.3f}s (sd {t['sd']:.3f})"
            )
            lines.append(f"{'parameter':<14}{'truth':>9}{'RMSEx1e4':>11}{'ESEx1e4':>11}{'ASEx1e4':>11}"
                         f"{'BIAS':>11}{'CP%':>7}")
            for r in rows:
                lines.append(
                    f"{r.name:<14}{r.truth:>9.4f}{r.RMSE * 1e4:>11.1f}{r.ESE * 1e4:>11.1f}{r.ASE * 1e4:>11.1f}"
                    f"{r.BIAS:>11.2e}{r.CP * 100:>7.1f}"
                )
            lines.append("")
        return "\n".join(lines)
