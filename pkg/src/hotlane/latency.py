"""BPR latency functions, the lane latency difference, and BPR fitting.

Latencies are in minutes and flows in vehicles per hour.  A lane group that
receives a share ``s`` of the corridor capacity has latency

    T_f * (1 + (c * flow / s) ** b)

where ``c`` is the congestion coefficient eta / V.  Ordinary lanes use the
share ``1 - rho`` and HOT lanes use ``rho``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from .exceptions import DomainError, InfeasibleFitError, SingularFitError


@dataclass(frozen=True)
class LatencyParams:
    """Parameters of a BPR latency function.

    Attributes
    ----------
    free_flow_time_min:
        Travel time at zero flow, in minutes.
    congestion_coeff:
        The ratio eta / V, in hours per vehicle.
    exponent_b:
        BPR exponent.  ``exponent_b = 1`` gives a linear latency.
    """

    free_flow_time_min: float
    congestion_coeff: float
    exponent_b: float = 4.0

    def __post_init__(self) -> None:
        for name in ("free_flow_time_min", "congestion_coeff", "exponent_b"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise DomainError(f"{name} must be finite, got {value!r}")
        if self.free_flow_time_min <= 0:
            raise DomainError("free_flow_time_min must be positive")
        if self.congestion_coeff <= 0:
            raise DomainError("congestion_coeff must be positive")
        if self.exponent_b < 1:
            raise DomainError("exponent_b must be at least 1")

    @classmethod
    def linear(cls, slope_a: float, intercept_b: float) -> "LatencyParams":
        """Latency ``intercept_b + slope_a * flow / share``."""
        return cls(intercept_b, slope_a / intercept_b, 1.0)

    def to_dict(self) -> dict:
        return {
            "free_flow_time_min": self.free_flow_time_min,
            "congestion_coeff": self.congestion_coeff,
            "exponent_b": self.exponent_b,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LatencyParams":
        return cls(
            float(data["free_flow_time_min"]),
            float(data["congestion_coeff"]),
            float(data.get("exponent_b", 4.0)),
        )


@dataclass(frozen=True)
class SegmentSpec:
    """One corridor segment, numbered from upstream (1) to downstream (E)."""

    id: int
    length_miles: float
    lanes_total: int
    latency: LatencyParams

    def __post_init__(self) -> None:
        if self.id < 1:
            raise DomainError("segment ids start at 1")
        if not self.length_miles > 0:
            raise DomainError("segment length must be positive")
        if self.lanes_total < 2:
            raise DomainError("a segment needs at least two lanes")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "length_miles": self.length_miles,
            "lanes_total": self.lanes_total,
            "latency": self.latency.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SegmentSpec":
        return cls(
            int(data["id"]),
            float(data["length_miles"]),
            int(data["lanes_total"]),
            LatencyParams.from_dict(data["latency"]),
        )


@dataclass(frozen=True)
class CapacitySplit:
    """Fraction of corridor capacity given to the HOT lanes."""

    rho: float

    def __post_init__(self) -> None:
        if not (0.0 < self.rho < 1.0):
            raise DomainError(f"rho must lie in (0, 1), got {self.rho!r}")

    def __float__(self) -> float:
        return float(self.rho)


def _as_rho(rho) -> float:
    value = float(rho)
    if not (0.0 < value < 1.0):
        raise DomainError(f"rho must lie in (0, 1), got {value!r}")
    return value


def bpr_latency(flow, capacity_share, params: LatencyParams):
    """BPR travel time in minutes for ``flow`` vehicles/hour on a capacity share.

    Accepts scalars or numpy arrays (broadcast together).  Returns a float for
    scalar input.
    """
    f = np.asarray(flow, dtype=float)
    s = np.asarray(capacity_share, dtype=float)
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(s))):
        raise DomainError("flow and capacity share must be finite")
    if np.any(f < 0):
        raise DomainError("flow must be non-negative")
    if np.any((s <= 0) | (s >= 1)):
        raise DomainError("capacity share must lie in (0, 1)")
    out = params.free_flow_time_min * (
        1.0 + (params.congestion_coeff * f / s) ** params.exponent_b
    )
    if out.ndim == 0:
        return float(out)
    return out


def _sigma_components(sigma) -> tuple[float, float, float]:
    if hasattr(sigma, "sigma_toll"):
        return float(sigma.sigma_toll), float(sigma.sigma_pool), float(sigma.sigma_o)
    toll, pool, o = (float(v) for v in sigma)
    return toll, pool, o


def latency_difference(
    sigma, demand: float, rho, params: LatencyParams, occupancy_A: int
) -> float:
    """Ordinary-lane latency minus HOT-lane latency induced by ``sigma``.

    ``sigma`` is either a strategy distribution object or a
    ``(toll, pool, ordinary)`` triple.  Pooling agents share a vehicle with
    ``occupancy_A - 1`` others, so they add ``1 / occupancy_A`` vehicles each.
    """
    toll, pool, o = _sigma_components(sigma)
    if abs(toll + pool + o - 1.0) > 1e-12:
        raise DomainError("strategy components must sum to one")
    if occupancy_A < 2:
        raise DomainError("occupancy_A must be at least 2")
    r = _as_rho(rho)
    x_o = o * demand
    x_h = (toll + pool / occupancy_A) * demand
    return bpr_latency(max(x_o, 0.0), 1.0 - r, params) - bpr_latency(
        max(x_h, 0.0), r, params
    )


def _fit_arrays(flow, share, latency, exponent_b):
    flow = np.asarray(flow, dtype=float)
    share = np.asarray(share, dtype=float)
    latency = np.asarray(latency, dtype=float)
    if flow.shape != share.shape or flow.shape != latency.shape or flow.ndim != 1:
        raise DomainError("observations must be equal-length one-dimensional arrays")
    if not (np.all(np.isfinite(flow)) and np.all(np.isfinite(share))
            and np.all(np.isfinite(latency))):
        raise DomainError("observations must be finite")
    if np.any((share <= 0) | (share >= 1)) or np.any(flow < 0):
        raise DomainError("observations need flow >= 0 and share in (0, 1)")
    if flow.size < 2:
        raise SingularFitError("at least two observations are required")
    regressor = (flow / share) ** exponent_b
    design = np.column_stack([np.ones_like(regressor), regressor])
    peak = float(np.max(np.abs(regressor)))
    scaled = design / np.array([1.0, peak if peak > 0 else 1.0])
    if np.linalg.matrix_rank(scaled) < 2 or np.ptp(regressor) <= 1e-12 * max(1.0, peak):
        raise SingularFitError("regressors (flow/share)^b are all identical")
    return design, latency


def fit_bpr(
    observations: Iterable[Sequence[float]], exponent_b: float = 4.0
) -> LatencyParams:
    """Ordinary least squares fit of ``T_f`` and ``eta / V`` with ``b`` fixed.

    Each observation is ``(flow, capacity_share, latency_minutes)``.  Latency
    is regressed on ``(flow / share) ** b`` with an intercept.  Since the
    slope equals ``T_f * (eta / V) ** b``, the fit gives ``T_f = intercept``
    and ``eta / V = (slope / intercept) ** (1 / b)``.
    """
    rows = [tuple(float(v) for v in obs) for obs in observations]
    if len(rows) < 2:
        raise SingularFitError("at least two observations are required")
    flow, share, latency = (np.array(col) for col in zip(*rows))
    design, y = _fit_arrays(flow, share, latency, exponent_b)
    # Scale the slope column so lstsq sees a well conditioned matrix.
    scale = float(np.max(np.abs(design[:, 1])))
    scaled = design.copy()
    scaled[:, 1] /= scale
    coef, *_ = np.linalg.lstsq(scaled, y, rcond=None)
    intercept = float(coef[0])
    slope = float(coef[1]) / scale
    if intercept <= 0:
        raise InfeasibleFitError(f"fitted free-flow time {intercept!r} is not positive")
    if slope <= 0:
        raise InfeasibleFitError(f"fitted congestion slope {slope!r} is not positive")
    return LatencyParams(intercept, (slope / intercept) ** (1.0 / exponent_b),
                         float(exponent_b))


class BPRRegressor(RegressorMixin, BaseEstimator):
    """scikit-learn style wrapper around :func:`fit_bpr`.

    ``X`` has two columns, flow (vehicles/hour) and capacity share; ``y`` is
    the observed latency in minutes.
    """

    def __init__(self, exponent_b: float = 4.0):
        self.exponent_b = exponent_b

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != 2:
            raise DomainError("X must have columns (flow, capacity_share)")
        self.params_ = fit_bpr(
            zip(X[:, 0], X[:, 1], np.asarray(y, dtype=float)), self.exponent_b
        )
        self.free_flow_time_ = self.params_.free_flow_time_min
        self.congestion_coeff_ = self.params_.congestion_coeff
        return self

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        return bpr_latency(X[:, 0], X[:, 1], self.params_)
