"""Design objectives, toll enumeration, Pareto fronts and hourly schedules.

Four objectives are evaluated at equilibrium:

* agent time: minutes summed over travelers;
* vehicle time: minutes summed over vehicles (a carpool of ``m`` counts once);
* revenue: dollars of tolls collected;
* total cost: value of time spent plus tolls plus carpool disutility.

Agent time, vehicle time and total cost are minimized and revenue is
maximized.
"""

from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import DesignError, DomainError, HotLaneError
from .multi import (
    MultiEquilibrium,
    Network,
    Population,
    TollSchedule,
    lane_latencies,
    solve_fixed_point,
)
from .preferences import DEFAULT_RESOLUTION, PreferenceDistribution
from .single import EquilibriumResult, GameConfig, action_moments, solve_equilibrium

OBJECTIVES = ("agent_time", "vehicle_time", "revenue", "total_cost")
MAXIMIZE = {"revenue"}
TIE_RTOL = 1e-9


# Objectives ----------------------------------------------------------------------------

def _single_terms(result: EquilibriumResult) -> dict:
    cfg = result.config
    s = result.sigma
    l_h, l_o = result.latencies
    D = cfg.demand_D
    return {
        "agent_time": D * (s.sigma_o * l_o + (s.sigma_toll + s.sigma_pool) * l_h),
        "vehicle_time": D * (s.sigma_o * l_o + (s.sigma_toll + s.sigma_pool / cfg.occupancy_A) * l_h),
        "revenue": cfg.toll_tau * D * s.sigma_toll,
    }


def _multi_terms(result: MultiEquilibrium) -> dict:
    st = result.state
    l_o, l_h = result.latencies_o, result.latencies_h
    return {
        "agent_time": float(st.agents_o @ l_o + st.agents_h @ l_h),
        "vehicle_time": float(st.x_o @ l_o + st.x_h @ l_h),
        "revenue": float(st.revenue),
    }


def objective_agent_time(eq_result, populations=None) -> float:
    """Total traveler minutes over the corridor."""
    if isinstance(eq_result, EquilibriumResult):
        return float(_single_terms(eq_result)["agent_time"])
    return _multi_terms(eq_result)["agent_time"]


def objective_vehicle_time(eq_result, populations=None) -> float:
    """Total vehicle minutes; a carpool of ``m`` travelers counts as one vehicle."""
    if isinstance(eq_result, EquilibriumResult):
        return float(_single_terms(eq_result)["vehicle_time"])
    return _multi_terms(eq_result)["vehicle_time"]


def objective_revenue(eq_result, populations=None, tolls=None) -> float:
    """Total tolls collected, in dollars."""
    if isinstance(eq_result, EquilibriumResult):
        return float(_single_terms(eq_result)["revenue"])
    return _multi_terms(eq_result)["revenue"]


def objective_total_cost(eq_result, populations=None, tolls=None) -> float:
    """Dollar cost of time, tolls and carpool disutility summed over travelers."""
    if isinstance(eq_result, EquilibriumResult):
        cfg = eq_result.config
        mom = action_moments(eq_result)
        l_h, l_o = eq_result.latencies
        D = cfg.demand_D
        time_cost = mom["o"][1] * l_o + (mom["toll"][1] + mom["pool"][1]) * l_h
        toll_cost = cfg.toll_tau * eq_result.sigma.sigma_toll
        return float(D * (time_cost + toll_cost + mom["pool"][2]))
    st = eq_result.state
    time_cost = float(st.beta_o @ eq_result.latencies_o + st.beta_h @ eq_result.latencies_h)
    return time_cost + float(st.revenue) + float(st.gamma_cost)


def evaluate_objectives(eq_result) -> dict:
    return {
        "agent_time": objective_agent_time(eq_result),
        "vehicle_time": objective_vehicle_time(eq_result),
        "revenue": objective_revenue(eq_result),
        "total_cost": objective_total_cost(eq_result),
    }


# Design points and problems -------------------------------------------------------------

@dataclass(frozen=True)
class DesignGrid:
    """Base prices from ``price_min`` to ``price_max`` in ``price_step`` increments."""

    price_min: float = 0.0
    price_max: float = 7.0
    price_step: float = 0.5
    rho_options: tuple[float, ...] = (0.25, 0.5, 0.75)

    def __post_init__(self) -> None:
        if not self.price_step > 0:
            raise DomainError("price_step must be positive")
        if self.price_max < self.price_min or self.price_min < 0:
            raise DomainError("need 0 <= price_min <= price_max")
        object.__setattr__(self, "rho_options", tuple(float(r) for r in self.rho_options))
        if not self.rho_options or any(not 0 < r < 1 for r in self.rho_options):
            raise DomainError("rho options must lie in (0, 1)")

    def prices(self) -> np.ndarray:
        n = int(math.floor((self.price_max - self.price_min) / self.price_step + 1e-9))
        return np.round(self.price_min + self.price_step * np.arange(n + 1), 10)

    def size(self, n_segments: int) -> int:
        return len(self.prices()) ** n_segments * len(self.rho_options)

    def to_dict(self) -> dict:
        return {"price_min": self.price_min, "price_max": self.price_max,
                "price_step": self.price_step, "rho_options": list(self.rho_options)}

    @classmethod
    def from_dict(cls, data: dict) -> "DesignGrid":
        return cls(float(data.get("price_min", 0.0)), float(data.get("price_max", 7.0)),
                   float(data.get("price_step", 0.5)),
                   tuple(data.get("rho_options", (0.25, 0.5, 0.75))))


@dataclass
class DesignPoint:
    """Evaluated toll design."""

    prices: tuple[float, ...]
    rho: float
    agent_time: float
    vehicle_time: float
    revenue: float
    total_cost: float
    regime_info: str = ""
    equilibrium: object = field(default=None, repr=False, compare=False)
    delta: tuple[float, ...] | None = field(default=None, repr=False, compare=False)

    def objective(self, name: str) -> float:
        if name not in OBJECTIVES:
            raise DomainError(f"unknown objective {name!r}")
        return getattr(self, name)

    def row(self) -> dict:
        out = {"rho": self.rho}
        for e, p in enumerate(self.prices, start=1):
            out[f"price_e{e}"] = p
        out.update({k: getattr(self, k) for k in OBJECTIVES})
        out["regime_info"] = self.regime_info
        return out


class SingleSegmentProblem:
    """Toll design on one segment solved with the exact single-segment solver."""

    def __init__(self, config: GameConfig, tol: float = 1e-9, max_iter: int = 200):
        self.config = config
        self.tol = tol
        self.max_iter = max_iter
        self.n_segments = 1

    def evaluate(self, prices: Sequence[float], rho: float, delta_init=None) -> DesignPoint:
        (tau,) = prices
        cfg = self.config.replace(toll_tau=float(tau), rho=float(rho))
        res = solve_equilibrium(cfg, self.tol, self.max_iter)
        obj = evaluate_objectives(res)
        return DesignPoint((float(tau),), float(rho), regime_info=res.regime.value,
                           equilibrium=res, delta=(res.delta_star,), **obj)


class CorridorProblem:
    """Toll design on a multi-segment corridor."""

    def __init__(self, network: Network, populations: Sequence[Population],
                 multipliers: Sequence[float] = (1.0, 0.5, 0.0), tol: float = 1e-9,
                 max_iter: int = 5000, resolution: int = DEFAULT_RESOLUTION,
                 keep_equilibrium: bool = False):
        self.network = network
        self.populations = tuple(populations)
        self.multipliers = tuple(multipliers)
        self.tol = tol
        self.max_iter = max_iter
        self.resolution = resolution
        self.keep_equilibrium = keep_equilibrium
        self.n_segments = network.E

    def evaluate(self, prices: Sequence[float], rho: float, delta_init=None) -> DesignPoint:
        """Solve the corridor at ``prices`` and ``rho``, optionally warm-started."""
        net = self.network.with_rho(rho)
        tolls = TollSchedule(tuple(float(p) for p in prices), self.multipliers)
        if all(p.demand == 0 for p in self.populations):
            return DesignPoint(tuple(tolls.base_price), float(rho), 0.0, 0.0, 0.0, 0.0, "A")
        res = solve_fixed_point(tolls, self.populations, net, self.tol, self.max_iter,
                                delta_init=delta_init, resolution=self.resolution)
        obj = evaluate_objectives(res)
        regime = "B" if res.state.revenue > 0 else "A"
        return DesignPoint(tuple(tolls.base_price), float(rho), regime_info=regime,
                           equilibrium=res if self.keep_equilibrium else None,
                           delta=tuple(float(v) for v in res.delta), **obj)


# Enumeration -------------------------------------------------------------------------------

@dataclass
class EnumerationResult:
    """All evaluated design points, the best per objective and recorded failures."""

    points: list[DesignPoint]
    best: dict[str, DesignPoint]
    failures: list[tuple[tuple[float, ...], float, str]]
    evaluated: int


def _tie_key(point: DesignPoint):
    return (sum(point.prices), tuple(point.prices), point.rho)


def select_best(points: Sequence[DesignPoint], objective: str) -> DesignPoint:
    """Best point for ``objective``; near ties go to cheaper, then lower-rho designs."""
    if not points:
        raise DesignError("no design points to choose from")
    sign = -1.0 if objective in MAXIMIZE else 1.0
    values = np.array([sign * p.objective(objective) for p in points])
    best = float(values.min())
    tol = TIE_RTOL * max(1.0, abs(best))
    tied = [p for p, v in zip(points, values) if v <= best + tol]
    return min(tied, key=_tie_key)


def _evaluate_task(args):
    problem, prices, rho, init = args
    try:
        return problem.evaluate(prices, rho, init), None
    except HotLaneError as err:
        return None, f"{type(err).__name__}: {err}"


def _run(problem, tasks, jobs, init):
    args = [(problem, p, r, init) for p, r in tasks]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_evaluate_task, args,
                                 chunksize=max(1, len(tasks) // (4 * jobs))))
    return [_evaluate_task(a) for a in args]


def enumerate_designs(
    grid: DesignGrid,
    problem,
    objectives: Sequence[str] = OBJECTIVES,
    jobs: int = 1,
    mode: str = "full",
    max_failure_fraction: float = 0.1,
    max_sweeps: int = 20,
) -> EnumerationResult:
    """Evaluate designs on the grid and pick the best point per objective.

    ``mode="full"`` evaluates every price vector for every rho.
    ``mode="coordinate"`` runs, per objective and rho, cyclic coordinate
    descent over one segment's price at a time until a sweep changes nothing;
    it is an approximation for corridors where the full grid is too large.
    Its solves are warm-started from the incumbent design's equilibrium, which
    depends only on the visiting order, so results stay reproducible.
    Points that fail to solve are recorded and skipped; more than
    ``max_failure_fraction`` failures abort the run.
    """
    for name in objectives:
        if name not in OBJECTIVES:
            raise DomainError(f"unknown objective {name!r}")
    prices = grid.prices()
    E = problem.n_segments
    cache: dict = {}
    failures: list = []

    def evaluate_many(tasks, init=None):
        todo = [t for t in dict.fromkeys(tasks) if t not in cache]
        for task, (point, err) in zip(todo, _run(problem, todo, jobs, init)):
            cache[task] = point
            if point is None:
                failures.append((task[0], task[1], err))
        total = len(cache)
        if total and len(failures) > max_failure_fraction * total:
            raise DesignError(
                f"{len(failures)} of {total} design points failed; first: {failures[0][2]}")
        return [cache[t] for t in tasks]

    if mode == "full":
        tasks = [(tuple(float(v) for v in combo), float(rho))
                 for rho in grid.rho_options
                 for combo in itertools.product(prices, repeat=E)]
        evaluate_many(tasks)
    elif mode == "coordinate":
        for rho in grid.rho_options:
            for name in objectives:
                sign = -1.0 if name in MAXIMIZE else 1.0
                current = tuple(float(prices[0]) for _ in range(E))
                evaluate_many([(current, float(rho))])
                for _ in range(max_sweeps):
                    changed = False
                    for e in range(E):
                        here = cache[(current, float(rho))]
                        init = None if here is None else here.delta
                        line = [current[:e] + (float(p),) + current[e + 1:] for p in prices]
                        pts = [p for p in evaluate_many([(c, float(rho)) for c in line], init)
                               if p is not None]
                        if not pts:
                            continue
                        choice = select_best(pts, name)
                        if here is None or sign * choice.objective(name) < sign * here.objective(
                                name) - TIE_RTOL * max(1.0, abs(here.objective(name))):
                            if choice.prices != current:
                                current = choice.prices
                                changed = True
                    if not changed:
                        break
    else:
        raise DomainError("mode must be 'full' or 'coordinate'")

    points = [p for p in cache.values() if p is not None]
    points.sort(key=lambda p: (p.rho, p.prices))
    if not points:
        raise DesignError("every design point failed")
    best = {name: select_best(points, name) for name in objectives}
    return EnumerationResult(points, best, failures, len(cache))


# Pareto fronts --------------------------------------------------------------------------------

def _pair(point, objective):
    if isinstance(point, DesignPoint):
        return point.objective(objective), point.revenue
    return float(point[0]), float(point[1])


def pareto_front(points: Sequence, minimize_objective: str = "agent_time") -> list:
    """Points not dominated under (minimize objective, maximize revenue).

    A point is dominated when another point is at least as good in both
    coordinates and strictly better in one.  Exact duplicates are all kept.
    The front is sorted by revenue ascending, so the objective is
    non-decreasing along it.  Plain ``(objective, revenue)`` pairs are
    accepted as well as design points.
    """
    if not points:
        raise DomainError("pareto_front needs at least one point")
    pairs = [_pair(p, minimize_objective) for p in points]
    order = sorted(range(len(points)), key=lambda i: (-pairs[i][1], pairs[i][0]))
    keep = []
    best_obj = math.inf
    i = 0
    while i < len(order):
        # Group points sharing the same revenue.
        j = i
        rev = pairs[order[i]][1]
        while j < len(order) and pairs[order[j]][1] == rev:
            j += 1
        group = order[i:j]
        group_min = pairs[group[0]][0]
        if group_min < best_obj:
            keep.extend(k for k in group if pairs[k][0] == group_min)
            best_obj = group_min
        i = j
    keep.sort(key=lambda k: (pairs[k][1], pairs[k][0], k))
    return [points[k] for k in keep]


# Hourly design ----------------------------------------------------------------------------------

@dataclass
class HourlyResult:
    """Optimal tolls for one hour and their improvement over the baseline."""

    hour: int
    best: dict[str, DesignPoint]
    baseline: DesignPoint
    improvement: dict[str, float]
    improvement_pct: dict[str, float]


def improvement(baseline: float, optimal: float, objective: str) -> tuple[float, float]:
    """Gain of ``optimal`` over ``baseline``; positive means better.

    The percentage is relative to ``|baseline|``; it is 0 when both values
    are 0 and NaN when only the baseline is 0.
    """
    gain = optimal - baseline if objective in MAXIMIZE else baseline - optimal
    if baseline != 0:
        pct = 100.0 * gain / abs(baseline)
    else:
        pct = 0.0 if gain == 0 else float("nan")
    return gain, pct


def hourly_design(
    grid: DesignGrid,
    problems_by_hour: dict[int, object],
    baseline_tolls: dict[int, tuple[tuple[float, ...], float]],
    objectives: Sequence[str] = OBJECTIVES,
    jobs: int = 1,
    mode: str = "full",
) -> list[HourlyResult]:
    """Independent enumeration per hour plus improvement over baseline prices.

    ``baseline_tolls[hour]`` is ``(prices, rho)`` of the design currently in
    force.
    """
    out = []
    for hour in sorted(problems_by_hour):
        problem = problems_by_hour[hour]
        result = enumerate_designs(grid, problem, objectives, jobs, mode)
        prices, rho = baseline_tolls[hour]
        base = problem.evaluate(tuple(prices), rho)
        gains, pcts = {}, {}
        for name in objectives:
            best = result.best[name]
            # The baseline competes with the grid when it is not on it.
            if select_best([best, base], name) is base and best.objective(name) != base.objective(name):
                result.best[name] = best = base
            gains[name], pcts[name] = improvement(base.objective(name), best.objective(name), name)
        out.append(HourlyResult(hour, dict(result.best), base, gains, pcts))
    return out


# Hourly scenarios ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class HourlyScenario:
    """Corridor with hourly demand split over fixed entry/exit shares.

    Every population shares one preference distribution; the demand of
    population ``(i, j)`` in hour ``t`` is ``share_ij * hourly_demand[t]``.
    """

    network: Network
    multipliers: tuple[float, ...]
    preferences: PreferenceDistribution
    od_shares: tuple[tuple[int, int, float], ...]
    hourly_demand: dict
    baseline_rho: float
    baseline_prices: dict
    name: str = ""

    @property
    def hours(self) -> tuple[int, ...]:
        return tuple(sorted(self.hourly_demand))

    @property
    def peak_hour(self) -> int:
        return max(self.hours, key=lambda h: (self.hourly_demand[h], -h))

    def populations(self, hour: int) -> list[Population]:
        total = self.hourly_demand[hour]
        return [Population(i, j, share * total, self.preferences)
                for i, j, share in self.od_shares]

    def problem(self, hour: int, **kwargs) -> CorridorProblem:
        return CorridorProblem(self.network, self.populations(hour), self.multipliers, **kwargs)

    def baseline(self, hour: int) -> tuple[tuple[float, ...], float]:
        return tuple(self.baseline_prices[hour]), self.baseline_rho

    @classmethod
    def from_dict(cls, data: dict) -> "HourlyScenario":
        try:
            network = Network.from_dict(data["network"])
            shares = tuple((int(r["entry_i"]), int(r["exit_j"]), float(r["share"]))
                           for r in data["od_shares"])
            demand = {int(h): float(v) for h, v in data["hourly_demand"].items()}
            base = data.get("baseline", {})
            prices = {int(h): tuple(float(p) for p in v)
                      for h, v in base.get("prices", {}).items()}
            return cls(network, tuple(float(m) for m in data.get(
                "occupancy_multiplier", (1.0, 0.5, 0.0))),
                PreferenceDistribution.from_dict(data["preferences"]), shares, demand,
                float(base.get("rho", network.rho)), prices, str(data.get("name", "")))
        except (KeyError, TypeError) as err:
            raise DomainError(f"malformed scenario: {err!r}") from err


def default_scenario_path() -> Path:
    """Path of the shipped synthetic corridor scenario."""
    return Path(str(resources.files("hotlane") / "data" / "i880_scenario.json"))


def load_scenario(path=None) -> HourlyScenario:
    """Load an hourly scenario JSON, defaulting to the shipped one."""
    path = default_scenario_path() if path is None else Path(path)
    return HourlyScenario.from_dict(json.loads(path.read_text()))
