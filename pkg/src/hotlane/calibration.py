"""Sensor ingestion, hourly aggregation, latency fitting and demand estimation.

The demand model treats each population's hourly demand as a non-negative
mass on every preference cube.  With latencies observed from data, the best
response of every traveler is known, so predicted lane flows and occupancy
counts are linear in those masses.  The masses are estimated by a
non-negative least-squares fit to observed lane flows and daily occupancy
shares.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import DomainError, IngestionError, NonConvergenceError
from .latency import LatencyParams, fit_bpr
from .multi import Network, Population, TollSchedule, integrate_population
from .preferences import DEFAULT_RESOLUTION

FIRST_HOUR = 5
HOURS_T = 15
SLOTS_PER_HOUR = 12
LANE_GROUPS = ("ordinary", "hot")


@dataclass(frozen=True)
class SensorRecord:
    """One five-minute observation of a sensor on one lane group."""

    timestamp: datetime
    sensor_id: str
    lane_group: str
    flow: float
    speed: float

    def __post_init__(self) -> None:
        if self.lane_group not in LANE_GROUPS:
            raise IngestionError(f"unknown lane group {self.lane_group!r}")
        if not (math.isfinite(self.flow) and self.flow >= 0):
            raise IngestionError("flow must be non-negative")
        if not (math.isfinite(self.speed) and self.speed > 0):
            raise IngestionError("speed must be positive")
        if self.timestamp.minute % 5 or self.timestamp.second:
            raise IngestionError(f"timestamp {self.timestamp} is off the 5-minute grid")


@dataclass(frozen=True)
class SensorPlacement:
    """Segment assignment and covered distance of a sensor."""

    segment_id: int
    distance_miles: float


@dataclass(frozen=True)
class HourlyAggregate:
    """Hourly flow and latency of one lane group on one segment.

    ``hour`` counts from 1 (5am to 6am) to 15 (7pm to 8pm).  Hours with a
    missing five-minute slot are flagged and carry no values.
    """

    day: str
    hour: int
    segment_id: int
    lane_group: str
    flow: float | None
    latency: float | None
    missing: bool = False

    def to_dict(self) -> dict:
        return {
            "day": self.day,
            "hour": self.hour,
            "segment_id": self.segment_id,
            "lane_group": self.lane_group,
            "flow_veh_per_hour": self.flow,
            "latency_min": self.latency,
            "missing": self.missing,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HourlyAggregate":
        return cls(
            str(data["day"]), int(data["hour"]), int(data["segment_id"]),
            str(data["lane_group"]), data["flow_veh_per_hour"], data["latency_min"],
            bool(data["missing"]),
        )


# CSV readers ---------------------------------------------------------------------

def _read_rows(path, columns: Sequence[str]):
    path = Path(path)
    with path.open(newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in columns):
            raise IngestionError(f"{path}: expected columns {', '.join(columns)}")
        for row in reader:
            yield reader.line_num, row


def _parse(path, line, fn, value, what):
    try:
        return fn(value)
    except (TypeError, ValueError) as err:
        raise IngestionError(f"{path}:{line}: bad {what} {value!r}") from err


def read_sensor_csv(path) -> list[SensorRecord]:
    """Read ``timestamp,sensor_id,lane_group,flow_veh_per_5min,speed_mph`` rows."""
    cols = ("timestamp", "sensor_id", "lane_group", "flow_veh_per_5min", "speed_mph")
    out = []
    for line, row in _read_rows(path, cols):
        ts = _parse(path, line, datetime.fromisoformat, row["timestamp"], "timestamp")
        flow = _parse(path, line, float, row["flow_veh_per_5min"], "flow")
        speed = _parse(path, line, float, row["speed_mph"], "speed")
        try:
            out.append(SensorRecord(ts, row["sensor_id"].strip(), row["lane_group"].strip(),
                                    flow, speed))
        except IngestionError as err:
            raise IngestionError(f"{path}:{line}: {err}") from err
    return out


def read_sensor_map(path) -> dict[str, SensorPlacement]:
    """Read ``sensor_id,segment_id,distance_miles`` rows."""
    out = {}
    for line, row in _read_rows(path, ("sensor_id", "segment_id", "distance_miles")):
        sid = row["sensor_id"].strip()
        if sid in out:
            raise IngestionError(f"{path}:{line}: sensor {sid!r} mapped twice")
        seg = _parse(path, line, int, row["segment_id"], "segment id")
        dist = _parse(path, line, float, row["distance_miles"], "distance")
        if dist <= 0:
            raise IngestionError(f"{path}:{line}: distance must be positive")
        out[sid] = SensorPlacement(seg, dist)
    return out


def read_toll_csv(path) -> dict[tuple[str, int], dict[int, float]]:
    """Read ``day,hour,segment_id,base_price_usd`` rows into ``{(day, hour): {segment: price}}``."""
    out: dict = defaultdict(dict)
    for line, row in _read_rows(path, ("day", "hour", "segment_id", "base_price_usd")):
        key = (row["day"].strip(), _parse(path, line, int, row["hour"], "hour"))
        seg = _parse(path, line, int, row["segment_id"], "segment id")
        out[key][seg] = _parse(path, line, float, row["base_price_usd"], "price")
    return dict(out)


def read_occupancy_csv(path) -> dict[str, dict[int, float]]:
    """Read ``day,occupancy_level,fraction`` rows into ``{day: {level: fraction}}``."""
    out: dict = defaultdict(dict)
    for line, row in _read_rows(path, ("day", "occupancy_level", "fraction")):
        level = _parse(path, line, int, row["occupancy_level"], "occupancy level")
        out[row["day"].strip()][level] = _parse(path, line, float, row["fraction"], "fraction")
    for day, shares in out.items():
        if abs(sum(shares.values()) - 1.0) > 1e-9:
            raise IngestionError(f"{path}: occupancy fractions of day {day} do not sum to 1")
    return dict(out)


# Aggregation -----------------------------------------------------------------------

def aggregate_hourly(
    records: Iterable[SensorRecord],
    segment_map: Mapping[str, SensorPlacement],
    segment_lengths: Mapping[int, float] | None = None,
) -> list[HourlyAggregate]:
    """Fold five-minute records into hourly flows and latencies.

    For each day, hour, segment and lane group, the flow is the mean over the
    covering sensors of their summed five-minute flows, and the latency is the
    sum over those sensors of ``distance / mean speed`` in minutes.  An hour
    in which any covering sensor lacks a slot is returned flagged as missing.
    Records outside 5am to 8pm are ignored.
    """
    if segment_lengths is not None:
        covered: dict[int, float] = defaultdict(float)
        for place in segment_map.values():
            covered[place.segment_id] += place.distance_miles
        for seg, length in segment_lengths.items():
            if abs(covered.get(seg, 0.0) - length) > 0.01 * length:
                raise IngestionError(
                    f"sensor distances on segment {seg} sum to {covered.get(seg, 0.0)}, "
                    f"expected {length}")

    slots: dict = defaultdict(dict)
    lanes_of: dict = defaultdict(set)
    days = set()
    for rec in records:
        place = segment_map.get(rec.sensor_id)
        if place is None:
            raise IngestionError(f"sensor {rec.sensor_id!r} is not mapped to a segment")
        lanes_of[rec.sensor_id].add(rec.lane_group)
        day = rec.timestamp.date().isoformat()
        days.add(day)
        t = rec.timestamp.hour - FIRST_HOUR + 1
        if not 1 <= t <= HOURS_T:
            continue
        key = (day, t, rec.sensor_id, rec.lane_group)
        minute = rec.timestamp.minute
        if minute in slots[key]:
            raise IngestionError(
                f"duplicate record for sensor {rec.sensor_id!r} at {rec.timestamp}")
        slots[key][minute] = (rec.flow, rec.speed)

    covering: dict = defaultdict(list)
    for sid in sorted(lanes_of):
        for lane in sorted(lanes_of[sid]):
            covering[(segment_map[sid].segment_id, lane)].append(sid)

    out = []
    for day in sorted(days):
        for t in range(1, HOURS_T + 1):
            for seg, lane in sorted(covering, key=lambda k: (k[0], LANE_GROUPS.index(k[1]))):
                flows, latency, missing = [], 0.0, False
                for sid in covering[(seg, lane)]:
                    obs = slots.get((day, t, sid, lane), {})
                    if len(obs) < SLOTS_PER_HOUR:
                        missing = True
                        break
                    values = [obs[m] for m in sorted(obs)]
                    flows.append(sum(v[0] for v in values))
                    mean_speed = sum(v[1] for v in values) / len(values)
                    latency += segment_map[sid].distance_miles / mean_speed * 60.0
                if missing:
                    out.append(HourlyAggregate(day, t, seg, lane, None, None, True))
                else:
                    out.append(HourlyAggregate(day, t, seg, lane,
                                               sum(flows) / len(flows), latency, False))
    return out


def fit_segment_latencies(
    aggregates: Iterable[HourlyAggregate],
    rho: float,
    exponent_b: float = 4.0,
) -> dict[int, LatencyParams]:
    """Fit one BPR curve per segment, pooling both lane groups.

    Ordinary-lane observations use capacity share ``1 - rho`` and HOT-lane
    observations use ``rho``.
    """
    obs: dict = defaultdict(list)
    for agg in aggregates:
        if agg.missing:
            continue
        share = rho if agg.lane_group == "hot" else 1.0 - rho
        obs[agg.segment_id].append((agg.flow, share, agg.latency))
    if not obs:
        raise DomainError("no complete hourly observations to fit")
    return {seg: fit_bpr(rows, exponent_b) for seg, rows in sorted(obs.items())}


# Demand estimation -------------------------------------------------------------------

@dataclass(frozen=True)
class HourObservation:
    """Observed lane flows and latencies of every segment in one day and hour."""

    day: str
    hour: int
    x_o: np.ndarray
    x_h: np.ndarray
    l_o: np.ndarray
    l_h: np.ndarray


def complete_observations(aggregates: Iterable[HourlyAggregate], E: int) -> list[HourObservation]:
    """Group aggregates by (day, hour), keeping hours with complete data on all segments."""
    table: dict = defaultdict(dict)
    for agg in aggregates:
        table[(agg.day, agg.hour)][(agg.segment_id, agg.lane_group)] = agg
    out = []
    for (day, hour), rows in sorted(table.items()):
        needed = [(e, lane) for e in range(1, E + 1) for lane in LANE_GROUPS]
        if any(k not in rows or rows[k].missing for k in needed):
            continue
        def arr(lane, attr):
            return np.array([getattr(rows[(e, lane)], attr) for e in range(1, E + 1)], float)
        out.append(HourObservation(day, hour, arr("ordinary", "flow"), arr("hot", "flow"),
                                   arr("ordinary", "latency"), arr("hot", "latency")))
    return out


def best_response_from_data(
    latencies_o, latencies_h, tolls: TollSchedule, populations: Sequence[Population],
    network: Network, resolution: int = DEFAULT_RESOLUTION,
) -> list[dict]:
    """Per-cube best-response shares under observed latencies.

    Returns, for each population, ``level`` (K, M): share of each cube at
    each occupancy level, and ``hot`` (K, M, L): share at each level using the
    HOT lane on each crossed segment.
    """
    l_o = np.asarray(latencies_o, dtype=float)
    l_h = np.asarray(latencies_h, dtype=float)
    if not (np.all(np.isfinite(l_o)) and np.all(np.isfinite(l_h))):
        raise DomainError("observed latencies must be finite")
    delta = l_o - l_h
    out = []
    for pop in populations:
        res = integrate_population(delta, tolls, pop, network, resolution)
        out.append({"level": res["level"][0], "hot": res["hot"][0]})
    return out


@dataclass
class DemandEstimate:
    """Estimated demand mass ``values[p, t, k]`` of population p, hour t and cube k."""

    populations: tuple[tuple[int, int], ...]
    hours: tuple[int, ...]
    values: np.ndarray
    objective: float = float("nan")
    kkt_residual: float = float("nan")
    iterations: int = 0
    trace: list = field(default_factory=list, repr=False)

    def for_hour(self, template: Sequence[Population], hour: int) -> list[Population]:
        """Populations of ``hour`` with demand and cube masses from the estimate."""
        t = self.hours.index(hour)
        out = []
        for p, pop in enumerate(template):
            mass = self.values[p, t]
            total = float(mass.sum())
            prefs = pop.preferences.with_masses(mass) if total > 0 else pop.preferences
            out.append(Population(pop.entry_i, pop.exit_j, total, prefs))
        return out

    def to_dict(self) -> dict:
        return {
            "populations": [list(p) for p in self.populations],
            "hours": list(self.hours),
            "Dgrid": self.values.tolist(),
            "objective": self.objective,
            "kkt_residual": self.kkt_residual,
            "iterations": self.iterations,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DemandEstimate":
        return cls(tuple(tuple(p) for p in data["populations"]), tuple(data["hours"]),
                   np.asarray(data["Dgrid"], dtype=float), data.get("objective", float("nan")),
                   data.get("kkt_residual", float("nan")), data.get("iterations", 0))


def tolls_for(history: Mapping, day: str, hour: int, network: Network,
              multipliers: Sequence[float]) -> TollSchedule:
    """Toll schedule in force on ``day`` and ``hour``; missing entries mean free."""
    prices = history.get((day, hour), {})
    return TollSchedule(tuple(prices.get(e, 0.0) for e in range(1, network.E + 1)),
                        tuple(multipliers))


@dataclass
class LinearDemandModel:
    """Design matrix linking demand masses to observed quantities.

    Rows are lane flows (day, hour, segment, lane) followed by daily ratio
    residuals (day, level).  ``flow_rows`` marks which rows are flows.
    """

    matrix: np.ndarray
    target: np.ndarray
    flow_rows: int
    shape: tuple[int, int, int]
    occupancy_rows: dict
    days: tuple[str, ...]


def build_linear_model(
    observations: Sequence[HourObservation],
    occupancy_shares: Mapping[str, Mapping[int, float]],
    tolls_history: Mapping,
    populations_template: Sequence[Population],
    network: Network,
    multipliers: Sequence[float] = (1.0, 0.5, 0.0),
    resolution: int = DEFAULT_RESOLUTION,
) -> LinearDemandModel:
    """Assemble the linear map from demand masses to flows and ratio residuals."""
    E, M = network.E, network.max_occupancy_M
    inv = 1.0 / network.levels
    P = len(populations_template)
    K = max(len(p.preferences.cubes) for p in populations_template)
    if any(len(p.preferences.cubes) != K for p in populations_template):
        raise DomainError("all template populations must share the cube count")
    hours = tuple(sorted({o.hour for o in observations}))
    days = tuple(sorted({o.day for o in observations}))
    n_var = P * len(hours) * K
    flow_rows, flow_target = [], []
    # occupancy vehicle counts per day: (M, n_var)
    level_counts = {d: np.zeros((M, n_var)) for d in days}
    for obs in observations:
        tolls = tolls_for(tolls_history, obs.day, obs.hour, network, multipliers)
        shares = best_response_from_data(obs.l_o, obs.l_h, tolls, populations_template,
                                          network, resolution)
        t = hours.index(obs.hour)
        rows_o = np.zeros((E, n_var))
        rows_h = np.zeros((E, n_var))
        for p, (pop, sh) in enumerate(zip(populations_template, shares)):
            cols = (p * len(hours) + t) * K + np.arange(K)
            hot_veh = np.einsum("kml,m->kl", sh["hot"], inv)  # (K, L)
            tot_veh = sh["level"] @ inv  # (K,)
            for l, e in enumerate(range(pop.entry_i - 1, pop.exit_j)):
                rows_h[e, cols] += hot_veh[:, l]
                rows_o[e, cols] += tot_veh - hot_veh[:, l]
            level_counts[obs.day][:, cols] += np.einsum("kml,m->mk", sh["hot"], inv)
        for e in range(E):
            flow_rows.append(rows_o[e])
            flow_target.append(obs.x_o[e])
            flow_rows.append(rows_h[e])
            flow_target.append(obs.x_h[e])
    ratio_rows = []
    occupancy_rows = {}
    for d in days:
        if d not in occupancy_shares:
            continue
        counts = level_counts[d]
        total = counts.sum(axis=0)
        for m in range(M):
            r = float(occupancy_shares[d].get(network.occupancy_levels[m], 0.0))
            occupancy_rows[(d, m)] = len(flow_rows) + len(ratio_rows)
            ratio_rows.append(r * total - counts[m])
    matrix = np.array(flow_rows + ratio_rows).reshape(-1, n_var)
    target = np.concatenate([np.array(flow_target), np.zeros(len(ratio_rows))])
    return LinearDemandModel(matrix, target, len(flow_rows), (P, len(hours), K),
                             occupancy_rows, days)


def _objective(A, y, reg, x):
    r = A @ x - y
    return float(r @ r + reg * (x @ x))


_POLISH_EVERY = 25


def _support_polish(A, y, reg, x):
    """Least-squares solve restricted to the positive coordinates of ``x``."""
    free = x > 0
    if not free.any():
        return None
    Af = A[:, free]
    rhs = y
    if reg > 0:
        Af = np.vstack([Af, math.sqrt(reg) * np.eye(int(free.sum()))])
        rhs = np.concatenate([y, np.zeros(int(free.sum()))])
    sol, *_ = np.linalg.lstsq(Af, rhs, rcond=None)
    cand = np.zeros_like(x)
    cand[free] = sol
    return cand if np.all(cand >= 0) else None


def projected_gradient_nnls(
    A: np.ndarray, y: np.ndarray, reg: float = 0.0, tol: float = 1e-6,
    max_iter: int = 20000,
) -> tuple[np.ndarray, dict]:
    """Minimize ``|A x - y|^2 + reg |x|^2`` subject to ``x >= 0``.

    Projected gradient with Barzilai-Borwein steps and an Armijo backtracking
    safeguard, so the objective never increases.  Every few steps, and
    whenever the first-order test passes, a least-squares solve restricted to
    the positive coordinates is tried and kept only if it is feasible and
    does not raise the objective beyond round-off.  Once the support is identified this solve
    lands on the optimum, which removes the slow tail of the gradient
    iteration.  The stationarity measure ``|P(x - g) - x|_inf`` is taken
    relative to its value at the start.
    """
    A = np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    n = A.shape[1]
    x = np.zeros(n)

    def grad(v):
        return 2.0 * (A.T @ (A @ v - y)) + 2.0 * reg * v

    def stationarity(v, g):
        return float(np.max(np.abs(np.maximum(v - g, 0.0) - v))) if n else 0.0

    g = grad(x)
    f = _objective(A, y, reg, x)
    scale0 = max(stationarity(x, g), 1e-300)
    lip = 2.0 * (np.linalg.norm(A, 2) ** 2 + reg) if n else 1.0
    step = 1.0 / lip if lip > 0 else 1.0
    trace = [f]
    it = 0
    polished_at = -1
    while True:
        kkt = stationarity(x, g) / scale0
        done = kkt <= tol or f == 0.0
        if (done or it % _POLISH_EVERY == 0) and polished_at != it:
            polished_at = it
            cand = _support_polish(A, y, reg, x)
            if cand is not None:
                f_c = _objective(A, y, reg, cand)
                g_c = grad(cand)
                # Allow round-off in the objective when stationarity improves.
                if f_c <= f or (f_c <= f * (1.0 + 1e-12)
                                and stationarity(cand, g_c) < stationarity(x, g)):
                    x, f = cand, f_c
                    g = grad(x)
                    trace.append(f)
                    continue
        if done:
            break
        if it >= max_iter:
            raise NonConvergenceError(
                f"projected gradient stopped with KKT residual {kkt:.3e}", residual=kkt,
                trace=trace)
        it += 1
        t = step
        while True:
            x_new = np.maximum(x - t * g, 0.0)
            f_new = _objective(A, y, reg, x_new)
            if f_new <= f - 1e-4 * float(g @ (x - x_new)) or t < 1e-30:
                break
            t *= 0.5
        if f_new > f:
            x_new, f_new = x, f
        s = x_new - x
        g_new = grad(x_new)
        yk = g_new - g
        sy = float(s @ yk)
        step = float(s @ s) / sy if sy > 0 else 1.0 / lip
        x, g, f = x_new, g_new, f_new
        trace.append(f)
    return x, {"objective": f, "kkt_residual": stationarity(x, g) / scale0,
               "iterations": it, "trace": trace}


def estimate_demand(
    aggregates: Iterable[HourlyAggregate],
    occupancy_shares: Mapping[str, Mapping[int, float]],
    tolls_history: Mapping,
    populations_template: Sequence[Population],
    network: Network,
    regularization: float = 0.0,
    multipliers: Sequence[float] = (1.0, 0.5, 0.0),
    resolution: int = DEFAULT_RESOLUTION,
    tol: float = 1e-6,
    max_iter: int = 20000,
) -> DemandEstimate:
    """Non-negative least-squares estimate of demand masses per population, hour and cube.

    The objective adds, over complete (day, hour) observations, squared
    errors of predicted ordinary and HOT flows on every segment, plus, for
    every day, squared residuals ``r_m * sum_m' X_m' - X_m`` where ``X_m``
    is the predicted HOT vehicle count at occupancy ``m`` summed over hours
    and segments, plus an optional ridge term.
    """
    if regularization < 0:
        raise DomainError("regularization must be non-negative")
    observations = complete_observations(aggregates, network.E)
    if not observations:
        raise DomainError("no complete hourly observations")
    model = build_linear_model(observations, occupancy_shares, tolls_history,
                               populations_template, network, multipliers, resolution)
    x, info = projected_gradient_nnls(model.matrix, model.target, regularization, tol, max_iter)
    P, T, K = model.shape
    hours = tuple(sorted({o.hour for o in observations}))
    return DemandEstimate(
        tuple((p.entry_i, p.exit_j) for p in populations_template), hours,
        x.reshape(P, T, K), info["objective"], info["kkt_residual"], info["iterations"],
        info["trace"],
    )


def predicted_observations(
    estimate: DemandEstimate,
    aggregates: Iterable[HourlyAggregate],
    tolls_history: Mapping,
    populations_template: Sequence[Population],
    network: Network,
    multipliers: Sequence[float] = (1.0, 0.5, 0.0),
    resolution: int = DEFAULT_RESOLUTION,
) -> tuple[list[HourObservation], np.ndarray, np.ndarray, dict]:
    """Observed and predicted flows plus predicted daily HOT vehicle counts by level."""
    observations = complete_observations(aggregates, network.E)
    observations = [o for o in observations if o.hour in estimate.hours]
    model = build_linear_model(observations, {}, tolls_history, populations_template,
                               network, multipliers, resolution)
    hours = tuple(sorted({o.hour for o in observations}))
    idx = [estimate.hours.index(h) for h in hours]
    x = estimate.values[:, idx, :].ravel()
    predicted = model.matrix[:model.flow_rows] @ x
    observed = model.target[:model.flow_rows]
    counts: dict = defaultdict(lambda: np.zeros(network.max_occupancy_M))
    inv = 1.0 / network.levels
    for obs in observations:
        tolls = tolls_for(tolls_history, obs.day, obs.hour, network, multipliers)
        shares = best_response_from_data(obs.l_o, obs.l_h, tolls, populations_template,
                                          network, resolution)
        t = estimate.hours.index(obs.hour)
        for p, sh in enumerate(shares):
            counts[obs.day] += np.einsum("kml,m,k->m", sh["hot"], inv, estimate.values[p, t])
    return observations, observed, predicted, dict(counts)


def validate_daily_ratios(
    estimate: DemandEstimate,
    aggregates: Iterable[HourlyAggregate],
    tolls_history: Mapping,
    populations_template: Sequence[Population],
    network: Network,
    occupancy_shares: Mapping[str, Mapping[int, float]] | None = None,
    multipliers: Sequence[float] = (1.0, 0.5, 0.0),
    resolution: int = DEFAULT_RESOLUTION,
) -> list[dict]:
    """Predicted versus observed HOT occupancy shares, one row per day and level."""
    _, _, _, counts = predicted_observations(estimate, aggregates, tolls_history,
                                             populations_template, network, multipliers,
                                             resolution)
    rows = []
    for day in sorted(counts):
        c = counts[day]
        total = c.sum()
        for m, level in enumerate(network.occupancy_levels):
            pred = float(c[m] / total) if total > 0 else (1.0 if m == 0 else 0.0)
            obs = None
            if occupancy_shares is not None and day in occupancy_shares:
                obs = float(occupancy_shares[day].get(level, 0.0))
            rows.append({"day": day, "occupancy_level": level, "predicted": pred,
                         "observed": obs})
    return rows
