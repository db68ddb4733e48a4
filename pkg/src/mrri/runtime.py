"""Stage-by-stage execution of an integration plan, and the dataset file format.

A plan is a list of stages separated by barriers.  ``leaf-fit`` and
``score-eval`` stages are embarrassingly parallel and are mapped over a
process pool; ``reduce`` stages combine children in child-index order in the
driver, so results never depend on the worker count.  Every task runs with
BLAS limited to one thread, which keeps floating-point reductions identical
between serial and pooled execution.
"""

from __future__ import annotations

import multiprocessing as mp
import os
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .domain import PartitionTree, path_key
from .errors import DatasetFormatError, DimensionError, MRRIError, TaskError
from .estimates import MetaEstimate
from .likelihood import DataBlock, FitOptions, ScoreMatrix, fit_local_mle, per_observation_scores

INTEGRATORS = ("recursive", "sequential")


# ---------------------------------------------------------------------------
# data sources
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Full-domain data held in memory; ``block`` slices one node's columns."""

    Y: np.ndarray
    X: np.ndarray
    coords: np.ndarray
    roi: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=np.float64)
        self.X = np.asarray(self.X, dtype=np.float64)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.roi is not None:
            self.roi = np.asarray(self.roi, dtype=np.int64)
        if self.Y.shape != (self.X.shape[0], self.coords.shape[0]):
            raise DimensionError("Y must be N x S with N = rows of X and S = rows of coords")

    @property
    def N(self) -> int:
        return self.Y.shape[0]

    @property
    def S(self) -> int:
        return self.coords.shape[0]

    @property
    def q(self) -> int:
        return self.X.shape[1]

    @property
    def d(self) -> int:
        return self.coords.shape[1]

    @property
    def roi_labels(self) -> np.ndarray:
        return np.ones(self.S, dtype=np.int64) if self.roi is None else self.roi

    def block(self, indices, path=()) -> DataBlock:
        idx = np.asarray(indices, dtype=np.int64)
        return DataBlock(self.Y[:, idx], self.X, self.coords[idx], self.roi_labels[idx], path)

    def rows(self, rows) -> "Dataset":
        return Dataset(self.Y[rows], self.X[rows], self.coords, self.roi, dict(self.meta))


_MAGIC = b"MRRIDATA"
_VERSION = 1
_HEADER = struct.Struct("<8sIQQIII")
FLAG_ROI = 1


def write_dataset(path, data: Dataset) -> None:
    """Write ``data`` in the little-endian binary container."""
    flags = FLAG_ROI if data.roi is not None else 0
    header = _HEADER.pack(_MAGIC, _VERSION, data.N, data.S, data.q, data.d, flags)
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in (data.Y, data.X, data.coords):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if flags & FLAG_ROI:
            fh.write(np.ascontiguousarray(data.roi, dtype="<u4").tobytes())


def read_header(path) -> dict:
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, N, S, q, d, flags = _HEADER.unpack(raw)
    if magic != _MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 8 * (N * S + N * q + S * d) + (4 * S if flags & FLAG_ROI else 0)
    if size != expected:
        raise DatasetFormatError(f"{path}: payload is {size} bytes, header implies {expected}")
    return {"magic": magic.decode(), "version": version, "N": N, "S": S, "q": q, "d": d, "flags": flags,
            "bytes": size}


class FileDataset:
    """Dataset backed by a file; ``block`` reads only the requested columns."""

    def __init__(self, path):
        self.path = os.fspath(path)
        h = read_header(self.path)
        self.header = h
        self.N, self.S, self.q, self.d = h["N"], h["S"], h["q"], h["d"]
        off = _HEADER.size
        self._y_off = off
        off += 8 * self.N * self.S
        self.X = np.fromfile(self.path, dtype="<f8", count=self.N * self.q, offset=off).reshape(self.N, self.q)
        off += 8 * self.N * self.q
        self.coords = np.fromfile(self.path, dtype="<f8", count=self.S * self.d, offset=off).reshape(self.S, self.d)
        off += 8 * self.S * self.d
        if h["flags"] & FLAG_ROI:
            self.roi = np.fromfile(self.path, dtype="<u4", count=self.S, offset=off).astype(np.int64)
        else:
            self.roi = None
        self.meta = {}

    def __getstate__(self):
        return {"path": self.path}

    def __setstate__(self, state):
        self.__init__(state["path"])

    @property
    def roi_labels(self) -> np.ndarray:
        return np.ones(self.S, dtype=np.int64) if self.roi is None else self.roi

    def _ymap(self):
        return np.memmap(self.path, dtype="<f8", mode="r", offset=self._y_off, shape=(self.N, self.S))

    def columns(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        return np.array(self._ymap()[:, idx], dtype=np.float64)

    @property
    def Y(self) -> np.ndarray:
        return np.array(self._ymap(), dtype=np.float64)

    def block(self, indices, path=()) -> DataBlock:
        idx = np.asarray(indices, dtype=np.int64)
        return DataBlock(self.columns(idx), self.X, self.coords[idx], self.roi_labels[idx], path)

    def load(self) -> Dataset:
        return Dataset(self.Y, self.X, self.coords, self.roi)


def read_dataset(path) -> FileDataset:
    return FileDataset(path)


# ---------------------------------------------------------------------------
# planning
# ---------------------------------------------------------------------------


@dataclass
class Stage:
    kind: str  # leaf-fit | score-eval | reduce
    resolution: int
    tasks: list  # leaf paths, (leaf, eval-node) pairs, or node paths

    def to_dict(self) -> dict:
        def enc(t):
            if t and isinstance(t[0], tuple):
                return [path_key(x) for x in t]
            return path_key(t)

        return {"kind": self.kind, "resolution": self.resolution, "tasks": [enc(t) for t in self.tasks]}


@dataclass
class TaskPlan:
    integrator: str
    tree: PartitionTree
    stages: list
    worker_count: int = 1

    @property
    def predicted_counters(self) -> dict:
        fits = sum(len(s.tasks) for s in self.stages if s.kind == "leaf-fit")
        evals = sum(len(s.tasks) for s in self.stages if s.kind == "score-eval")
        reduces = sum(len(s.tasks) for s in self.stages if s.kind == "reduce")
        return {"leaf_fits": fits, "score_evals": fits + evals, "reduces": reduces}

    def to_dict(self) -> dict:
        return {
            "integrator": self.integrator,
            "worker_count": self.worker_count,
            "stages": [s.to_dict() for s in self.stages],
            "predicted": self.predicted_counters,
        }


def plan(tree: PartitionTree, integrator: str, workers: int = 1) -> TaskPlan:
    """Stage list for one integrator.

    Both start with every leaf fit.  The sequential plan then reduces one
    resolution at a time.  The recursive plan precedes each reduce at
    resolution ``m <= M - 2`` by a score-eval stage that re-evaluates every
    leaf under each resolution-``m+1`` node at that node's estimate.
    """
    if integrator not in INTEGRATORS:
        raise ValueError(f"unknown integrator {integrator!r}")
    if workers < 1:
        raise ValueError("workers must be >= 1")
    M = tree.M
    stages = [Stage("leaf-fit", M, tree.leaves())]
    for m in range(M - 1, -1, -1):
        if integrator == "recursive" and m <= M - 2:
            pairs = [(leaf, c) for c in tree.level(m + 1) for leaf in tree.leaves_under(c)]
            stages.append(Stage("score-eval", m + 1, pairs))
        stages.append(Stage("reduce", m, tree.level(m)))
    return TaskPlan(integrator, tree, stages, workers)


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(source, spec, fit_opts):
    _WORKER["source"] = source
    _WORKER["spec"] = spec
    _WORKER["fit"] = fit_opts


def _run_task(task):
    kind, path, indices, theta = task
    src, spec = _WORKER["source"], _WORKER["spec"]
    with threadpool_limits(limits=1):
        try:
            block = src.block(indices, path)
            if kind == "leaf-fit":
                return fit_local_mle(block, spec, opts=_WORKER["fit"])
            return per_observation_scores(block, theta, spec)
        except MRRIError as exc:
            raise TaskError(f"{kind} failed at node {path_key(path)}: {type(exc).__name__}: {exc}", kind, path) from exc
        except Exception as exc:  # noqa: BLE001 - reported with the node path
            raise TaskError(f"{kind} failed at node {path_key(path)}: {type(exc).__name__}: {exc}", kind, path) from exc


class _Runner:
    def __init__(self, source, spec, fit_opts, workers):
        self.workers = workers
        _init_worker(source, spec, fit_opts)
        self.pool = None
        if workers > 1:
            self.pool = ProcessPoolExecutor(
                max_workers=workers,
                mp_context=mp.get_context("fork"),
                initializer=_init_worker,
                initargs=(source, spec, fit_opts),
            )

    def map(self, tasks):
        if self.pool is None:
            return [_run_task(t) for t in tasks]
        return list(self.pool.map(_run_task, tasks))

    def close(self):
        if self.pool is not None:
            self.pool.shutdown(cancel_futures=True)


def _spill(spill_dir, name, scores: ScoreMatrix):
    os.makedirs(spill_dir, exist_ok=True)
    np.save(os.path.join(spill_dir, f"{name}.npy"), scores.values)


def execute(planned: TaskPlan, source, spec, opts=None, *, nodes: dict | None = None,
            leaf_fits: dict | None = None) -> MetaEstimate:
    """Run a plan and return the root estimate.

    ``nodes`` (if given) receives every node estimate keyed by path.
    ``leaf_fits`` lets a caller reuse leaf MLEs across integrators; fits
    computed here are written back into it.
    """
    from .integration import IntegrationOptions, project_subtree, reduce_node

    opts = opts or IntegrationOptions()
    tree = planned.tree
    fit_opts = opts.fit if opts.fit is not None else FitOptions()
    names = spec.param_names
    est: dict = {}
    proj: dict = {}
    evals: dict = {}
    counters = {"leaf_fits": 0, "score_evals": 0, "reduces": 0, "reused_leaf_fits": 0, "ridge_events": 0}
    timing: dict = {}
    runner = _Runner(source, spec, fit_opts, planned.worker_count)
    try:
        for stage in planned.stages:
            t0 = time.perf_counter()
            if stage.kind == "leaf-fit":
                todo = [p for p in stage.tasks if leaf_fits is None or p not in leaf_fits]
                out = runner.map([("leaf-fit", p, tree.nodes[p], None) for p in todo])
                fitted = dict(zip(todo, out))
                for p in stage.tasks:
                    if p in fitted:
                        est[p] = fitted[p]
                        if leaf_fits is not None:
                            leaf_fits[p] = fitted[p]
                    else:
                        est[p] = leaf_fits[p]
                        counters["reused_leaf_fits"] += 1
                    counters["leaf_fits"] += 1
                    counters["score_evals"] += 1
                    if opts.spill_dir:
                        _spill(opts.spill_dir, f"leaf-{path_key(p)}", est[p].scores)
            elif stage.kind == "score-eval":
                tasks = [("score-eval", leaf, tree.nodes[leaf], est[c].theta) for leaf, c in stage.tasks]
                for (leaf, c), sm in zip(stage.tasks, runner.map(tasks)):
                    evals[(leaf, c)] = sm
                    counters["score_evals"] += 1
                    if opts.spill_dir:
                        _spill(opts.spill_dir, f"eval-{path_key(leaf)}-at-{path_key(c)}", sm)
            else:
                for node in stage.tasks:
                    blocks, thetas = [], []
                    for c in tree.children(node):
                        if tree.is_leaf(c):
                            blocks.append(est[c].scores)
                        elif planned.integrator == "sequential":
                            blocks.append(proj[c])
                        else:
                            leaf_scores = {leaf: evals[(leaf, c)] for leaf in tree.leaves_under(c)}
                            blocks.append(project_subtree(tree, c, leaf_scores, opts.ridge))
                        thetas.append(est[c].theta)
                    try:
                        res = reduce_node(node, blocks, thetas, opts.ridge, names)
                    except MRRIError as exc:
                        raise TaskError(
                            f"reduce failed at node {path_key(node)}: {type(exc).__name__}: {exc}", "reduce", node
                        ) from exc
                    est[node] = res.estimate
                    proj[node] = res.projected
                    counters["reduces"] += 1
                    counters["ridge_events"] += int(res.estimate.ridge_eps > 0)
            key = f"{stage.kind}@{stage.resolution}"
            timing[key] = timing.get(key, 0.0) + time.perf_counter() - t0
    finally:
        runner.close()

    root = est[()]
    method = planned.integrator if tree.M > 0 else "leaf-mle"
    out = MetaEstimate(
        theta=root.theta.copy(),
        J=root.J.copy(),
        path=(),
        method=method,
        names=names,
        ridge_eps=root.ridge_eps,
        counters=counters,
        diagnostics={"timing": timing, "predicted": planned.predicted_counters, "workers": planned.worker_count},
    )
    if nodes is not None:
        for p, e in est.items():
            nodes[p] = e
        nodes[()] = out
    return out
