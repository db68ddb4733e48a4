"""Spatial domains and their recursive nearest-neighbour partition.

Nodes of a partition are addressed by index paths: the root is ``()``,
its children ``(1,)``, ``(2,)``, ..., grandchildren ``(1, 1)``, ``(1, 2)``
and so on, with 1-based child indices.  A path of length ``m`` names a set
at resolution ``m``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import InfeasiblePartitionError, InvalidDomainError

Path = tuple[int, ...]

STRATEGIES = ("coordinate-split", "roi-balanced-coordinate-split")
DEFAULT_MIN_LEAF_SIZE = 25


@dataclass(frozen=True)
class Location:
    coords: tuple[float, ...]
    roi: int | None = None

    @property
    def d(self) -> int:
        return len(self.coords)


@dataclass
class SpatialDomain:
    """An ordered set of ``S`` distinct locations in ``R^d``.

    ``roi`` holds optional 1-based region labels; when present, equal labels
    must occupy one contiguous run of indices, in increasing label order.
    """

    coords: np.ndarray
    roi: np.ndarray | None = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim == 1:
            coords = coords[:, None]
        if coords.ndim != 2 or coords.shape[0] == 0:
            raise InvalidDomainError("coords must be a non-empty (S, d) array")
        if np.unique(coords, axis=0).shape[0] != coords.shape[0]:
            raise InvalidDomainError("duplicate locations in domain")
        self.coords = coords
        if self.roi is not None:
            roi = np.asarray(self.roi, dtype=np.int64).reshape(-1)
            if roi.shape[0] != coords.shape[0]:
                raise InvalidDomainError("roi labels must have one entry per location")
            if roi.min() < 1:
                raise InvalidDomainError("roi labels are 1-based")
            if np.any(np.diff(roi) < 0):
                raise InvalidDomainError("roi labels must form contiguous groups in label order")
            self.roi = roi

    @property
    def S(self) -> int:
        return self.coords.shape[0]

    @property
    def d(self) -> int:
        return self.coords.shape[1]

    @property
    def roi_labels(self) -> np.ndarray:
        """Labels with single-region domains reported as all ones."""
        if self.roi is None:
            return np.ones(self.S, dtype=np.int64)
        return self.roi

    @property
    def roi_count(self) -> int:
        return int(self.roi_labels.max())

    @property
    def locations(self) -> list[Location]:
        roi = self.roi
        return [
            Location(tuple(float(v) for v in row), None if roi is None else int(roi[j]))
            for j, row in enumerate(self.coords)
        ]

    @classmethod
    def from_locations(cls, locations: Sequence[Location]) -> "SpatialDomain":
        dims = {loc.d for loc in locations}
        if len(dims) != 1:
            raise InvalidDomainError("all locations must share one dimension")
        coords = np.array([loc.coords for loc in locations], dtype=np.float64)
        rois = [loc.roi for loc in locations]
        if all(r is None for r in rois):
            return cls(coords)
        if any(r is None for r in rois):
            raise InvalidDomainError("roi labels must be given for all locations or none")
        return cls(coords, np.array(rois))


def grid_domain(*extents: tuple[int, int]) -> SpatialDomain:
    """Regular integer grid, e.g. ``grid_domain((1, 10), (1, 10))`` for [1,10]^2."""
    axes = [np.arange(lo, hi + 1, dtype=np.float64) for lo, hi in extents]
    mesh = np.meshgrid(*axes, indexing="ij")
    return SpatialDomain(np.column_stack([m.ravel() for m in mesh]))


def multi_roi_grid(boxes: Sequence[Sequence[tuple[int, int]]]) -> SpatialDomain:
    """Concatenate grid boxes, labelling the k-th box as ROI ``k + 1``."""
    parts = [grid_domain(*box).coords for box in boxes]
    roi = np.concatenate([np.full(len(p), k + 1) for k, p in enumerate(parts)])
    return SpatialDomain(np.vstack(parts), roi)


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------


def _slabs(coords: np.ndarray, idx: np.ndarray, k: int) -> list[np.ndarray]:
    """Cut ``idx`` into ``k`` contiguous slabs along the widest axis."""
    pts = coords[idx]
    extent = pts.max(axis=0) - pts.min(axis=0)
    axis = int(np.argmax(extent))  # first axis wins ties
    others = [a for a in range(coords.shape[1]) if a != axis]
    # np.lexsort treats the last key as primary
    keys = [idx] + [pts[:, a] for a in reversed(others)] + [pts[:, axis]]
    order = idx[np.lexsort(keys)]
    return [np.sort(part) for part in np.array_split(order, k)]


def _split(coords: np.ndarray, idx: np.ndarray, k: int) -> list[np.ndarray]:
    if k == 1:
        return [np.sort(idx)]
    if k % 2 == 0:
        out = []
        for half in _slabs(coords, idx, 2):
            out.extend(_split(coords, half, k // 2))
        return out
    return _slabs(coords, idx, k)


def _build_nodes(coords: np.ndarray, idx: np.ndarray, branching: Sequence[int]) -> dict[Path, np.ndarray]:
    nodes: dict[Path, np.ndarray] = {(): np.sort(idx)}
    frontier: list[Path] = [()]
    for k_m in branching:
        nxt = []
        for path in frontier:
            for c, child in enumerate(_split(coords, nodes[path], k_m), start=1):
                nodes[path + (c,)] = child
                nxt.append(path + (c,))
        frontier = nxt
    return nodes


@dataclass
class PartitionTree:
    M: int
    branching: tuple[int, ...]
    nodes: dict[Path, np.ndarray]
    strategy: str = "coordinate-split"
    min_leaf_size: int = DEFAULT_MIN_LEAF_SIZE
    S: int = field(default=0)

    def __post_init__(self):
        self.branching = tuple(int(k) for k in self.branching)
        if not self.S:
            self.S = int(self.nodes[()].size)

    @property
    def root(self) -> np.ndarray:
        return self.nodes[()]

    def children(self, path: Path) -> list[Path]:
        if len(path) >= self.M:
            return []
        return [path + (k,) for k in range(1, self.branching[len(path)] + 1)]

    def is_leaf(self, path: Path) -> bool:
        return len(path) == self.M

    def level(self, m: int) -> list[Path]:
        """Node paths at resolution ``m`` in child-index order."""
        return sorted(p for p in self.nodes if len(p) == m)

    def leaves(self) -> list[Path]:
        return self.level(self.M)

    def leaves_under(self, path: Path) -> list[Path]:
        n = len(path)
        return [p for p in self.leaves() if p[:n] == path]

    def __iter__(self) -> Iterator[Path]:
        return iter(sorted(self.nodes, key=lambda p: (len(p), p)))

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "branching": list(self.branching),
            "strategy": self.strategy,
            "min_leaf_size": self.min_leaf_size,
            "nodes": {path_key(p): self.nodes[p].tolist() for p in self},
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, data: dict) -> "PartitionTree":
        nodes = {parse_path(k): np.asarray(v, dtype=np.int64) for k, v in data["nodes"].items()}
        tree = cls(
            M=int(data["M"]),
            branching=tuple(data["branching"]),
            nodes=nodes,
            strategy=data.get("strategy", "coordinate-split"),
            min_leaf_size=int(data.get("min_leaf_size", DEFAULT_MIN_LEAF_SIZE)),
        )
        check_tree(tree)
        return tree

    @classmethod
    def from_json(cls, text: str) -> "PartitionTree":
        return cls.from_dict(json.loads(text))


def path_key(path: Path) -> str:
    return "0" if not path else ".".join(str(k) for k in path)


def parse_path(key: str) -> Path:
    key = key.strip()
    if key in ("", "0", "root"):
        return ()
    return tuple(int(k) for k in key.split("."))


def check_tree(tree: PartitionTree) -> None:
    """Raise if any node's children fail to be a disjoint cover of it."""
    if len(tree.branching) != tree.M:
        raise InfeasiblePartitionError("branching length must equal M")
    for path in tree:
        kids = tree.children(path)
        if not kids:
            continue
        try:
            parts = [tree.nodes[c] for c in kids]
        except KeyError as exc:
            raise InfeasiblePartitionError(f"missing child {exc} of node {path_key(path)}") from None
        joined = np.concatenate(parts)
        if joined.size != np.unique(joined).size:
            raise InfeasiblePartitionError(f"children of node {path_key(path)} overlap")
        if not np.array_equal(np.sort(joined), np.sort(tree.nodes[path])):
            raise InfeasiblePartitionError(f"children of node {path_key(path)} do not cover it")


def build_partition(
    domain: SpatialDomain,
    M: int,
    branching: Sequence[int],
    strategy: str = "coordinate-split",
    min_leaf_size: int = DEFAULT_MIN_LEAF_SIZE,
) -> PartitionTree:
    """Recursive kd-style partition of ``domain`` into ``M`` nested resolutions.

    Each node is cut along its widest coordinate axis at the (lexicographic)
    median; a branching of 4 is two nested binary cuts, odd branchings are
    contiguous slabs.  Child sizes differ by at most one.

    In ``roi-balanced-coordinate-split`` mode each ROI is partitioned on its
    own with the same tree shape and node ``k`` is the union of the per-ROI
    node ``k`` blocks.
    """
    branching = tuple(int(k) for k in branching)
    if M < 0 or len(branching) != M:
        raise InfeasiblePartitionError(f"need len(branching) == M, got M={M}, branching={branching}")
    if any(k < 1 for k in branching):
        raise InfeasiblePartitionError("branching factors must be positive")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown partition strategy {strategy!r}")
    n_leaves = math.prod(branching)

    if strategy == "coordinate-split":
        groups = [np.arange(domain.S)]
    else:
        labels = domain.roi_labels
        groups = [np.flatnonzero(labels == r) for r in np.unique(labels)]

    per_group = []
    for g in groups:
        if n_leaves * min_leaf_size > g.size:
            raise InfeasiblePartitionError(
                f"{n_leaves} leaves of at least {min_leaf_size} locations need "
                f"{n_leaves * min_leaf_size} locations, have {g.size}"
            )
        nodes = _build_nodes(domain.coords, g, branching)
        small = [p for p, v in nodes.items() if len(p) == M and v.size < min_leaf_size]
        if small:
            raise InfeasiblePartitionError(
                f"leaf {path_key(small[0])} has fewer than {min_leaf_size} locations"
            )
        per_group.append(nodes)

    if len(per_group) == 1:
        nodes = per_group[0]
    else:
        nodes = {p: np.sort(np.concatenate([g[p] for g in per_group])) for p in per_group[0]}
    return PartitionTree(M, branching, nodes, strategy, min_leaf_size, S=domain.S)
