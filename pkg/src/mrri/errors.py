"""Exception hierarchy shared by every module."""

from __future__ import annotations


class MRRIError(Exception):
    """Base class for all package errors."""


class InvalidDomainError(MRRIError, ValueError):
    pass


class InfeasiblePartitionError(MRRIError, ValueError):
    pass


class DimensionError(MRRIError, ValueError):
    pass


class NonPositiveDefiniteError(MRRIError):
    """Covariance factorization failed at every jitter level."""

    def __init__(self, message: str, jitter_levels=()):
        super().__init__(message)
        self.jitter_levels = tuple(jitter_levels)

    def __reduce__(self):
        return type(self), (str(self), self.jitter_levels)


class NonConvergenceError(MRRIError):
    """Optimizer stopped without meeting its tolerance.

    ``best`` holds the best iterate seen (parameter vector) when available.
    """

    def __init__(self, message: str, best=None, iterations: int = 0):
        super().__init__(message)
        self.best = best
        self.iterations = iterations

    def __reduce__(self):
        return type(self), (str(self), self.best, self.iterations)


class SingularVariabilityError(MRRIError):
    pass


class ConditioningError(MRRIError):
    pass


class CapacityError(MRRIError):
    pass


class DatasetFormatError(MRRIError):
    pass


class TaskError(MRRIError):
    """A runtime task failed; carries the stage kind and node path."""

    def __init__(self, message: str, stage: str, path: tuple):
        super().__init__(message)
        self.stage = stage
        self.path = tuple(path)

    def __reduce__(self):
        return type(self), (str(self), self.stage, self.path)
