"""The estimate record passed between resolutions and written to disk."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConditioningError

METHODS = ("leaf-mle", "meta", "recursive", "sequential", "full-mle")


@dataclass
class MetaEstimate:
    """An estimate with its Godambe information ``J`` (sum-over-i scale).

    ``inv(J)`` estimates the covariance of ``theta`` directly.
    """

    theta: np.ndarray
    J: np.ndarray
    path: tuple = ()
    method: str = "meta"
    names: tuple = ()
    ridge_eps: float = 0.0
    counters: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    scores: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        self.J = np.asarray(self.J, dtype=np.float64)
        self.path = tuple(self.path)
        self.names = tuple(self.names)

    @property
    def p(self) -> int:
        return self.theta.size

    @property
    def cov(self) -> np.ndarray:
        Jsym = 0.5 * (self.J + self.J.T)
        try:
            L = np.linalg.cholesky(Jsym)
        except np.linalg.LinAlgError:
            raise ConditioningError(f"J at node {self.path} is not positive definite") from None
        Linv = np.linalg.inv(L)
        return Linv.T @ Linv

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    def params(self, spec):
        from .model import ThetaParams

        return ThetaParams.from_vector(self.theta, spec)

    def to_dict(self) -> dict:
        names = list(self.names) or [f"theta[{k}]" for k in range(self.p)]
        return {
            "theta": dict(zip(names, self.theta.tolist())),
            "names": names,
            "J": self.J.reshape(-1).tolist(),
            "p": self.p,
            "node_path": list(self.path),
            "method": self.method,
            "ridge_eps": self.ridge_eps,
            "counters": dict(self.counters),
            "diagnostics": _jsonable(self.diagnostics),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, data: dict) -> "MetaEstimate":
        names = data["names"]
        p = int(data.get("p", len(names)))
        return cls(
            theta=[data["theta"][n] for n in names],
            J=np.asarray(data["J"], dtype=np.float64).reshape(p, p),
            path=tuple(data.get("node_path", ())),
            method=data.get("method", "meta"),
            names=tuple(names),
            ridge_eps=float(data.get("ridge_eps", 0.0)),
            counters=dict(data.get("counters", {})),
            diagnostics=dict(data.get("diagnostics", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "MetaEstimate":
        return cls.from_dict(json.loads(text))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
