"""Single-segment HOT lane equilibrium.

Every traveler picks one of three actions: pay the toll and use the HOT lane,
form a carpool of size ``A`` and use the HOT lane for free, or use the
ordinary lanes.  Given the latency difference ``delta`` between ordinary and
HOT lanes, a traveler with value of time ``beta`` and carpool disutility
``gamma`` pays the toll when ``beta * delta >= tau`` and ``gamma >= tau``,
pools when ``beta * delta >= gamma`` and ``gamma <= tau``, and stays on the
ordinary lanes otherwise.

The equilibrium is found by bisection on a scalar monotone equation whose
form depends on the regime:

* regime A1 and A2 (no one pays the toll): the pooling share ``z`` solves
  ``z = pool_mass(delta(z))``;
* regime B (some travelers pay): the latency difference solves
  ``delta = ell_delta(sigma(delta))``.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .exceptions import (
    DomainError,
    HotLaneError,
    NonConvergenceError,
    RegimeInconsistencyError,
)
from .latency import LatencyParams, _as_rho, bpr_latency
from .preferences import Halfspace, HalfspaceRegion, PreferenceDistribution, region_moments

DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 200


class Regime(str, enum.Enum):
    """Equilibrium regime: A1 and A2 have no toll payers, B has some."""

    A1 = "A1"
    A2 = "A2"
    B = "B"


@dataclass(frozen=True)
class StrategyDistribution:
    """Shares of travelers paying the toll, pooling, and on ordinary lanes."""

    sigma_toll: float
    sigma_pool: float
    sigma_o: float

    def __post_init__(self) -> None:
        for name in ("sigma_toll", "sigma_pool", "sigma_o"):
            v = getattr(self, name)
            if not (-1e-12 <= v <= 1 + 1e-12):
                raise DomainError(f"{name}={v!r} is not a fraction")
        if abs(self.sigma_toll + self.sigma_pool + self.sigma_o - 1.0) > 1e-10:
            raise DomainError("strategy shares must sum to one")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.sigma_toll, self.sigma_pool, self.sigma_o)


@dataclass(frozen=True)
class GameConfig:
    """Inputs of the single-segment game.

    ``preferences`` must be two dimensional (``beta`` and a scalar ``gamma``).
    """

    demand_D: float
    toll_tau: float
    rho: float
    occupancy_A: int
    latency: LatencyParams
    preferences: PreferenceDistribution

    def __post_init__(self) -> None:
        object.__setattr__(self, "rho", _as_rho(self.rho))
        if not (math.isfinite(self.demand_D) and self.demand_D > 0):
            raise DomainError("demand_D must be positive")
        if not (math.isfinite(self.toll_tau) and self.toll_tau >= 0):
            raise DomainError("toll_tau must be non-negative")
        if int(self.occupancy_A) != self.occupancy_A or self.occupancy_A < 2:
            raise DomainError("occupancy_A must be an integer >= 2")
        if self.preferences.dim != 2:
            raise DomainError("single-segment preferences must be two dimensional")

    def replace(self, **changes) -> "GameConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "demand_D": self.demand_D,
            "toll_tau": self.toll_tau,
            "rho": self.rho,
            "occupancy_A": self.occupancy_A,
            "latency": self.latency.to_dict(),
            "preferences": self.preferences.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GameConfig":
        return cls(
            float(data["demand_D"]),
            float(data["toll_tau"]),
            float(data["rho"]),
            int(data.get("occupancy_A", 2)),
            LatencyParams.from_dict(data["latency"]),
            PreferenceDistribution.from_dict(data["preferences"]),
        )


@dataclass(frozen=True)
class EquilibriumResult:
    """Solved equilibrium of a single-segment game."""

    sigma: StrategyDistribution
    delta_star: float
    flows: tuple[float, float]
    latencies: tuple[float, float]
    regime: Regime
    solver_residual: float
    iterations: int = 0
    config: GameConfig | None = field(default=None, compare=False, repr=False)

    @property
    def x_h(self) -> float:
        return self.flows[0]

    @property
    def x_o(self) -> float:
        return self.flows[1]

    def to_dict(self) -> dict:
        return {
            "regime": self.regime.value,
            "sigma": {
                "toll": self.sigma.sigma_toll,
                "pool": self.sigma.sigma_pool,
                "o": self.sigma.sigma_o,
            },
            "delta_star": self.delta_star,
            "flows": {"x_h": self.flows[0], "x_o": self.flows[1]},
            "latencies": {"l_h": self.latencies[0], "l_o": self.latencies[1]},
            "solver_residual": self.solver_residual,
            "iterations": self.iterations,
        }


# Region geometry ---------------------------------------------------------------

def best_response_regions(
    ell_delta: float, tau: float, bounds: tuple[float, float]
) -> tuple[HalfspaceRegion, HalfspaceRegion, HalfspaceRegion]:
    """Toll, pool and ordinary best-response regions in ``(beta, gamma)``.

    Each region is clipped to the box ``[0, beta_bar] x [0, gamma_bar]``.
    """
    beta_bar, gamma_bar = (float(b) for b in bounds)
    if ell_delta < 0 or tau < 0 or beta_bar <= 0 or gamma_bar <= 0:
        raise DomainError("latency difference, toll and bounds must be non-negative")
    d, t = float(ell_delta), float(tau)
    box = (
        Halfspace((1.0, 0.0), 0.0, ">="),
        Halfspace((1.0, 0.0), beta_bar, "<="),
        Halfspace((0.0, 1.0), 0.0, ">="),
        Halfspace((0.0, 1.0), gamma_bar, "<="),
    )
    toll = HalfspaceRegion(
        (Halfspace((d, 0.0), t, ">="), Halfspace((0.0, 1.0), t, ">=")) + box
    )
    pool = HalfspaceRegion(
        (Halfspace((d, -1.0), 0.0, ">="), Halfspace((0.0, 1.0), t, "<=")) + box
    )
    ordinary = HalfspaceRegion(
        (Halfspace((d, 0.0), t, "<="), Halfspace((d, -1.0), 0.0, "<=")) + box
    )
    return toll, pool, ordinary


class _Masses:
    """Closed-form best-response region masses for a two-dimensional cube mixture."""

    def __init__(self, prefs: PreferenceDistribution):
        lo, hi = prefs.lower, prefs.upper
        self.bl, self.bh = lo[:, 0], hi[:, 0]
        self.gl, self.gh = lo[:, 1], hi[:, 1]
        self.wb = self.bh - self.bl
        self.wg = self.gh - self.gl
        self.h = prefs.masses
        self.beta_bar = float(self.bh.max())
        self.gamma_bar = float(self.gh.max())

    def pool(self, delta: float, tau: float) -> float:
        """Mass of ``{gamma <= min(beta * delta, tau)}``."""
        cap = np.clip(tau - self.gl, 0.0, self.wg)
        mean = _clip_mean(self.bl * delta - self.gl, self.bh * delta - self.gl, cap)
        return float(np.sum(self.h * mean / self.wg))

    def toll(self, delta: float, tau: float) -> float:
        """Mass of ``{beta * delta >= tau, gamma >= tau}``."""
        if tau <= 0.0:
            return 1.0 if delta >= 0.0 else 0.0
        if delta <= 0.0:
            return 0.0
        pb = np.clip((self.bh - tau / delta) / self.wb, 0.0, 1.0)
        pg = np.clip((self.gh - tau) / self.wg, 0.0, 1.0)
        return float(np.sum(self.h * pb * pg))

    def shares(self, delta: float, tau: float) -> tuple[float, float, float]:
        toll = self.toll(delta, tau)
        pool = self.pool(delta, tau) if tau > 0 else 0.0
        pool = min(pool, 1.0 - toll)
        return toll, pool, max(1.0 - toll - pool, 0.0)


def _clip_mean(s0, s1, cap):
    """Average of ``clip(s, 0, cap)`` for ``s`` running linearly from s0 to s1."""
    s0, s1, cap = np.broadcast_arrays(
        np.asarray(s0, float), np.asarray(s1, float), np.asarray(cap, float)
    )
    lo, hi = np.minimum(s0, s1), np.maximum(s0, s1)
    length = hi - lo
    a = np.clip(lo, 0.0, cap)
    b = np.clip(hi, 0.0, cap)
    above = np.maximum(hi - np.maximum(lo, cap), 0.0)
    integral = (b - a) * 0.5 * (a + b) + above * cap
    safe = np.where(length > 0, length, 1.0)
    return np.where(length > 0, integral / safe, a)


def strategy_masses(
    delta: float, tau: float, prefs: PreferenceDistribution
) -> StrategyDistribution:
    """Best-response shares ``(toll, pool, ordinary)`` at latency difference ``delta``."""
    return StrategyDistribution(*_Masses(prefs).shares(float(delta), float(tau)))


# Threshold quantities ----------------------------------------------------------

def _lanes(config: GameConfig, toll: float, pool: float, o: float):
    D, r, p = config.demand_D, config.rho, config.latency
    x_h = (toll + pool / config.occupancy_A) * D
    x_o = o * D
    l_h = bpr_latency(x_h, r, p)
    l_o = bpr_latency(x_o, 1.0 - r, p)
    return x_h, x_o, l_h, l_o


def _ell_delta(config: GameConfig, toll: float, pool: float, o: float) -> float:
    _, _, l_h, l_o = _lanes(config, toll, pool, o)
    return l_o - l_h


def threshold_distribution(config: GameConfig) -> tuple[StrategyDistribution, float]:
    """Threshold distribution and its latency difference ``ell_dagger``.

    The threshold pooling share is the mass of
    ``{gamma <= min(tau, gamma_bar) * beta / beta_bar}``.
    """
    masses = _Masses(config.preferences)
    slope = min(config.toll_tau, masses.gamma_bar) / masses.beta_bar
    pool = masses.pool(slope, math.inf) if slope > 0 else 0.0
    sigma = StrategyDistribution(0.0, pool, 1.0 - pool)
    return sigma, _ell_delta(config, 0.0, pool, 1.0 - pool)


def classify_regime(config: GameConfig) -> Regime:
    """Regime B iff ``tau < min(gamma_bar, beta_bar * ell_dagger)``; else A1 or A2."""
    prefs = config.preferences
    beta_bar, gamma_bar = prefs.beta_max, prefs.gamma_max(2)
    if config.toll_tau <= 0.0:
        return Regime.B
    _, ell_dagger = threshold_distribution(config)
    if config.toll_tau < min(gamma_bar, beta_bar * ell_dagger):
        return Regime.B
    return Regime.A1 if beta_bar * ell_dagger <= gamma_bar else Regime.A2


# Bisection ---------------------------------------------------------------------

def _bisect(
    fn: Callable[[float], float],
    lo: float,
    hi: float,
    increasing: bool,
    tol: float,
    max_iter: int,
) -> tuple[float, float, int]:
    """Find ``x`` in ``[lo, hi]`` with ``|fn(x)| < tol`` for a monotone ``fn``.

    Returns ``(x, fn(x), iterations)``.
    """
    sign = 1.0 if increasing else -1.0
    f_lo, f_hi = sign * fn(lo), sign * fn(hi)
    if abs(f_lo) < tol:
        return lo, sign * f_lo, 0
    if abs(f_hi) < tol:
        return hi, sign * f_hi, 0
    if f_lo > 0 or f_hi < 0:
        raise RegimeInconsistencyError(
            f"bracket [{lo!r}, {hi!r}] has no sign change ({f_lo!r}, {f_hi!r})"
        )
    best_x, best_f = (lo, f_lo) if abs(f_lo) <= abs(f_hi) else (hi, f_hi)
    for it in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        f_mid = sign * fn(mid)
        if abs(f_mid) < abs(best_f):
            best_x, best_f = mid, f_mid
        if abs(f_mid) < tol:
            return mid, sign * f_mid, it
        if f_mid < 0:
            lo = mid
        else:
            hi = mid
    else:
        raise NonConvergenceError(
            f"bisection did not reach tolerance {tol} in {max_iter} steps",
            residual=abs(best_f),
        )
    if abs(best_f) < tol:
        return best_x, sign * best_f, it
    raise NonConvergenceError(
        f"bracket collapsed with residual {abs(best_f)!r} above tolerance {tol}",
        residual=abs(best_f),
    )


def _result(config, sigma, regime, residual, iterations) -> EquilibriumResult:
    x_h, x_o, l_h, l_o = _lanes(config, *sigma)
    return EquilibriumResult(
        sigma=StrategyDistribution(*sigma),
        delta_star=l_o - l_h,
        flows=(x_h, x_o),
        latencies=(l_h, l_o),
        regime=regime,
        solver_residual=residual,
        iterations=iterations,
        config=config,
    )


def _solve_zero_toll(config, tol, max_iter, bracket):
    # Free HOT lane: travelers split so that both lane groups have equal latency.
    def gap(s: float) -> float:
        return _ell_delta(config, s, 0.0, 1.0 - s)

    lo, hi = bracket if bracket is not None else (0.0, 1.0)
    s, value, it = _bisect(gap, lo, hi, False, tol, max_iter)
    return _result(config, (s, 0.0, 1.0 - s), Regime.B, abs(value), it)


def solve_equilibrium(
    config: GameConfig,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    bracket: tuple[float, float] | None = None,
) -> EquilibriumResult:
    """Unique Wardrop equilibrium of the single-segment game.

    ``bracket`` optionally replaces the default bisection interval (for the
    pooling share in regime A, for ``delta`` in regime B).  A bracket without
    a sign change raises :class:`RegimeInconsistencyError`.
    """
    if not tol > 0:
        raise DomainError("tol must be positive")
    if config.toll_tau <= 0.0:
        return _solve_zero_toll(config, tol, max_iter, bracket)

    masses = _Masses(config.preferences)
    tau = config.toll_tau
    regime = classify_regime(config)

    if regime is Regime.B:
        def psi(delta: float) -> float:
            toll, pool, o = masses.shares(delta, tau)
            return _ell_delta(config, toll, pool, o) - delta

        delta_bar = bpr_latency(config.demand_D, 1.0 - config.rho, config.latency) - (
            config.latency.free_flow_time_min
        )
        lo, hi = bracket if bracket is not None else (tau / masses.beta_bar, delta_bar)
        delta, value, it = _bisect(psi, lo, hi, False, tol, max_iter)
        return _result(config, masses.shares(delta, tau), regime, abs(value), it)

    def defect(z: float) -> float:
        d = _ell_delta(config, 0.0, z, 1.0 - z)
        return z - masses.pool(d, tau)

    sigma_dagger, _ = threshold_distribution(config)
    if bracket is None:
        if regime is Regime.A1:
            bracket = (0.0, sigma_dagger.sigma_pool)
        else:
            bracket = (sigma_dagger.sigma_pool, 1.0)
    z, value, it = _bisect(defect, bracket[0], bracket[1], True, tol, max_iter)
    return _result(config, (0.0, z, 1.0 - z), regime, abs(value), it)


def comparative_sweep(
    config: GameConfig,
    vary: str,
    grid: Sequence[float],
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> list[EquilibriumResult]:
    """Solve one equilibrium per value of ``rho`` or ``tau`` in ``grid``."""
    field_name = {"rho": "rho", "tau": "toll_tau"}.get(vary)
    if field_name is None:
        raise DomainError("vary must be 'rho' or 'tau'")
    values = [float(v) for v in grid]
    if any(b <= a for a, b in zip(values, values[1:])):
        raise DomainError("grid must be strictly increasing")
    results = []
    for value in values:
        try:
            results.append(
                solve_equilibrium(config.replace(**{field_name: value}), tol, max_iter)
            )
        except HotLaneError as err:
            err.grid_value = value
            raise
    return results


def action_moments(result: EquilibriumResult) -> dict[str, np.ndarray]:
    """Mass and first moments ``[mass, E[beta 1], E[gamma 1]]`` of each action region.

    Uses exact polygon integration at the equilibrium latency difference.
    Regime-A equilibria assign the whole HOT share to pooling.
    """
    config = result.config
    prefs = config.preferences
    bounds = (prefs.beta_max, prefs.gamma_max(2))
    delta = max(result.delta_star, 0.0)
    regions = best_response_regions(delta, config.toll_tau, bounds)
    out = {}
    for name, region in zip(("toll", "pool", "o"), regions):
        out[name] = region_moments(prefs, region)
    if config.toll_tau <= 0.0:
        # At zero toll every traveler is indifferent between the lanes; the
        # split is set by the equalization condition, not by preferences.
        s = result.sigma
        beta_mean = region_moments(prefs, HalfspaceRegion())[1]
        out["toll"] = np.array([s.sigma_toll, s.sigma_toll * beta_mean, 0.0])
        out["pool"] = np.zeros(3)
        out["o"] = np.array([s.sigma_o, s.sigma_o * beta_mean, 0.0])
    return out
