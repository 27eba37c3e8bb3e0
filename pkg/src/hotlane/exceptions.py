"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class HotLaneError(Exception):
    """Base class for every error raised by the library."""


class DomainError(HotLaneError, ValueError):
    """An input lies outside the domain of a model function."""


class SingularFitError(HotLaneError):
    """The regression design matrix is rank deficient."""


class InfeasibleFitError(HotLaneError):
    """A fitted latency model violates the positivity assumptions."""


class NonConvergenceError(HotLaneError):
    """An iterative solver hit its iteration budget.

    The last residual and, when available, the iteration trace are attached
    so callers can report them.
    """

    def __init__(self, message: str, residual: float = float("nan"), trace=None):
        super().__init__(message)
        self.residual = residual
        self.trace = list(trace) if trace is not None else []


class RegimeInconsistencyError(HotLaneError):
    """A bracketing interval does not contain a sign change.

    Raised when the regime classification and the bisection bracket disagree,
    which signals an internal invariant violation.
    """


class IngestionError(HotLaneError, ValueError):
    """Raw input files are malformed or inconsistent."""


class DesignError(HotLaneError):
    """Toll design enumeration could not be completed."""
