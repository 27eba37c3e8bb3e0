"""Command-line front end: ingestion, calibration, solving and toll design.

Every subcommand reads one JSON run configuration (``--config``) whose file
paths are resolved relative to the configuration file.  Flags override the
matching configuration entries.  Outputs are written to ``--out`` with fixed
ordering and formatting so that reruns produce byte-identical files.

Exit codes: 0 on success, 2 for invalid input, 3 when a solver fails to
converge.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .calibration import (
    HourlyAggregate,
    aggregate_hourly,
    estimate_demand,
    fit_segment_latencies,
    predicted_observations,
    read_occupancy_csv,
    read_sensor_csv,
    read_sensor_map,
    read_toll_csv,
    validate_daily_ratios,
)
from .design import (
    OBJECTIVES,
    CorridorProblem,
    DesignGrid,
    DesignPoint,
    SingleSegmentProblem,
    enumerate_designs,
    hourly_design,
    load_scenario,
    pareto_front,
)
from .exceptions import (
    DesignError,
    DomainError,
    HotLaneError,
    InfeasibleFitError,
    IngestionError,
    NonConvergenceError,
    RegimeInconsistencyError,
    SingularFitError,
)
from .multi import Network, Population, load_corridor, solve_fixed_point
from .preferences import DEFAULT_RESOLUTION
from .single import GameConfig, solve_equilibrium

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NONCONVERGENCE = 3


class InputError(HotLaneError):
    """Missing or malformed run configuration."""


# Run configuration ------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Settings of one CLI run.

    ``inputs`` maps input names (``sensors``, ``sensor_map``, ``network``,
    ``aggregates``, ``tolls``, ``occupancy``, ``template``, ``single``,
    ``corridor``, ``scenario``, ``design_points``) to paths.
    """

    base_dir: Path
    inputs: dict = field(default_factory=dict)
    out: Path = Path("out")
    tol: float | None = None
    max_iter: int | None = None
    resolution: int = DEFAULT_RESOLUTION
    jobs: int = 1
    grid: DesignGrid = field(default_factory=DesignGrid)
    mode: str = "full"
    objectives: tuple[str, ...] = OBJECTIVES
    hour: int | None = None
    hours: tuple[int, ...] | None = None
    exponent_b: float = 4.0
    regularization: float = 0.0
    rho: float | None = None
    multipliers: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.tol is not None and not self.tol > 0:
            raise InputError("tol must be positive")
        if self.max_iter is not None and self.max_iter < 1:
            raise InputError("max_iter must be positive")
        if self.resolution < 1:
            raise InputError("resolution must be positive")
        if self.jobs < 1:
            raise InputError("jobs must be at least 1")
        if self.mode not in ("full", "coordinate"):
            raise InputError("mode must be 'full' or 'coordinate'")
        for name in self.objectives:
            if name not in OBJECTIVES:
                raise InputError(f"unknown objective {name!r}")

    def path(self, name: str) -> Path:
        """Resolved path of input ``name``; it must exist."""
        if name not in self.inputs:
            raise InputError(f"configuration lacks input {name!r}")
        path = Path(self.inputs[name])
        if not path.is_absolute():
            path = self.base_dir / path
        if not path.exists():
            raise InputError(f"input {name!r} not found: {path}")
        return path

    def has(self, name: str) -> bool:
        return name in self.inputs

    @classmethod
    def load(cls, path: Path | None, overrides: argparse.Namespace) -> "RunConfig":
        data: dict = {}
        base = Path.cwd()
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise InputError(f"configuration file not found: {path}")
            try:
                data = json.loads(path.read_text())
            except json.JSONDecodeError as err:
                raise InputError(f"{path}: invalid JSON ({err})") from err
            base = path.resolve().parent
        solver = data.get("solver", {})
        design = data.get("design", {})
        calib = data.get("calibration", {})
        try:
            grid = DesignGrid.from_dict(design.get("grid", {}))
            cfg = cls(
                base_dir=base,
                inputs=dict(data.get("inputs", {})),
                out=Path(data.get("out", "out")),
                tol=solver.get("tol"),
                max_iter=solver.get("max_iter"),
                resolution=int(solver.get("resolution", DEFAULT_RESOLUTION)),
                jobs=int(data.get("jobs", 1)),
                grid=grid,
                mode=str(design.get("mode", "full")),
                objectives=tuple(design.get("objectives", OBJECTIVES)),
                hour=design.get("hour"),
                hours=tuple(design["hours"]) if "hours" in design else None,
                exponent_b=float(calib.get("exponent_b", 4.0)),
                regularization=float(calib.get("regularization", 0.0)),
                rho=data.get("rho"),
                multipliers=tuple(data["occupancy_multiplier"])
                if "occupancy_multiplier" in data else None,
            )
        except (TypeError, ValueError) as err:
            raise InputError(f"bad configuration value: {err}") from err
        if not cfg.out.is_absolute():
            cfg.out = base / cfg.out
        if overrides.out is not None:
            cfg.out = Path(overrides.out)
        if overrides.jobs is not None:
            cfg.jobs = overrides.jobs
        if overrides.tol is not None:
            cfg.tol = overrides.tol
        if overrides.resolution is not None:
            cfg.resolution = overrides.resolution
        cfg.__post_init__()
        return cfg

    def solver_kwargs(self) -> dict:
        kwargs = {}
        if self.tol is not None:
            kwargs["tol"] = self.tol
        if self.max_iter is not None:
            kwargs["max_iter"] = self.max_iter
        return kwargs


# Output helpers ------------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (np.floating,)):
        return repr(float(value))
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())


def write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise InputError(f"{path}: invalid JSON ({err})") from err


def _load_aggregates(cfg: RunConfig) -> list[HourlyAggregate]:
    data = _read_json(cfg.path("aggregates"))
    try:
        return [HourlyAggregate.from_dict(r) for r in data["aggregates"]]
    except (KeyError, TypeError, ValueError) as err:
        raise InputError(f"malformed aggregates file: {err!r}") from err


def _load_network(cfg: RunConfig) -> Network:
    data = _read_json(cfg.path("network"))
    try:
        network = Network.from_dict(data.get("network", data))
    except (KeyError, TypeError) as err:
        raise InputError(f"malformed network file: {err!r}") from err
    if cfg.rho is not None:
        network = network.with_rho(float(cfg.rho))
    return network


def _multipliers(cfg: RunConfig, network: Network) -> tuple[float, ...]:
    if cfg.multipliers is not None:
        return cfg.multipliers
    return tuple([1.0, 0.5, 0.0][:network.max_occupancy_M]
                 + [0.0] * max(0, network.max_occupancy_M - 3))


def _design_header(E: int) -> list[str]:
    return (["rho"] + [f"price_e{e}" for e in range(1, E + 1)]
            + list(OBJECTIVES) + ["regime_info"])


def _design_row(point: DesignPoint) -> list:
    return ([point.rho, *point.prices]
            + [float(point.objective(k)) for k in OBJECTIVES] + [point.regime_info])


# Commands ----------------------------------------------------------------------------------------

def cmd_ingest(cfg: RunConfig) -> int:
    records = read_sensor_csv(cfg.path("sensors"))
    placement = read_sensor_map(cfg.path("sensor_map"))
    lengths = None
    if cfg.has("network"):
        network = _load_network(cfg)
        lengths = {s.id: s.length_miles for s in network.segments}
    aggregates = aggregate_hourly(records, placement, lengths)
    write_json(cfg.out / "hourly_aggregates.json",
               {"aggregates": [a.to_dict() for a in aggregates]})
    days = sorted({a.day for a in aggregates})
    hours = sorted({(a.day, a.hour) for a in aggregates})
    missing = sum(a.missing for a in aggregates)
    print(f"days={len(days)} hours={len(hours)} rows={len(aggregates)} missing={missing}")
    return EXIT_OK


def cmd_fit_latency(cfg: RunConfig) -> int:
    aggregates = _load_aggregates(cfg)
    if not aggregates:
        raise InputError("no hourly aggregates to fit")
    rho = cfg.rho if cfg.rho is not None else (_load_network(cfg).rho if cfg.has("network")
                                               else None)
    if rho is None:
        raise InputError("fit-latency needs 'rho' or a network input")
    fits = fit_segment_latencies(aggregates, float(rho), cfg.exponent_b)
    write_json(cfg.out / "latency_params.json", {
        "exponent_b": cfg.exponent_b,
        "rho": float(rho),
        "segments": {str(seg): p.to_dict() for seg, p in sorted(fits.items())},
    })
    print(f"exponent_b={cfg.exponent_b!r}")
    for seg, p in sorted(fits.items()):
        print(f"segment {seg}: free_flow_time_min={p.free_flow_time_min!r} "
              f"congestion_coeff={p.congestion_coeff!r}")
    return EXIT_OK


def _load_template(cfg: RunConfig) -> list[Population]:
    data = _read_json(cfg.path("template"))
    try:
        return [Population.from_dict(p) for p in data["populations"]]
    except (KeyError, TypeError) as err:
        raise InputError(f"malformed population template: {err!r}") from err


def cmd_estimate_demand(cfg: RunConfig) -> int:
    aggregates = _load_aggregates(cfg)
    network = _load_network(cfg)
    occupancy = read_occupancy_csv(cfg.path("occupancy"))
    tolls = read_toll_csv(cfg.path("tolls"))
    template = _load_template(cfg)
    mult = _multipliers(cfg, network)
    kwargs = {"tol": cfg.tol} if cfg.tol is not None else {}
    if cfg.max_iter is not None:
        kwargs["max_iter"] = cfg.max_iter
    estimate = estimate_demand(aggregates, occupancy, tolls, template, network,
                               cfg.regularization, mult, cfg.resolution, **kwargs)
    payload = estimate.to_dict()
    write_json(cfg.out / "demand_estimate.json", payload)
    ratios = validate_daily_ratios(estimate, aggregates, tolls, template, network, occupancy,
                                   mult, cfg.resolution)
    write_csv(cfg.out / "daily_ratio_validation.csv",
              ["day", "occupancy_level", "predicted", "observed"],
              [[r["day"], r["occupancy_level"], r["predicted"],
                "" if r["observed"] is None else r["observed"]] for r in ratios])
    obs, observed, predicted, _ = predicted_observations(estimate, aggregates, tolls, template,
                                                          network, mult, cfg.resolution)
    rows = []
    k = 0
    for o in obs:
        for e in range(network.E):
            for lane in ("ordinary", "hot"):
                rows.append([o.day, o.hour, e + 1, lane, float(observed[k]),
                             float(predicted[k])])
                k += 1
    write_csv(cfg.out / "flow_validation.csv",
              ["day", "hour", "segment_id", "lane_group", "observed", "predicted"], rows)
    P, T, K = estimate.values.shape
    print(f"populations={P} hours={T} cubes={K} objective={estimate.objective!r} "
          f"kkt={estimate.kkt_residual!r}")
    return EXIT_OK


def cmd_solve(cfg: RunConfig) -> int:
    if cfg.has("single"):
        config = GameConfig.from_dict(_read_json(cfg.path("single")))
        result = solve_equilibrium(config, **cfg.solver_kwargs())
        payload = {"model": "single", **result.to_dict()}
        print(f"regime={result.regime.value} delta_star={result.delta_star!r}")
    elif cfg.has("corridor"):
        network, pops, tolls = load_corridor(cfg.path("corridor"))
        if cfg.rho is not None:
            network = network.with_rho(float(cfg.rho))
        result = solve_fixed_point(tolls, pops, network, resolution=cfg.resolution,
                                   **cfg.solver_kwargs())
        payload = {"model": "corridor", **result.to_dict()}
        print(f"iterations={result.iterations} residual={result.residual!r}")
    else:
        raise InputError("solve needs a 'single' or 'corridor' input")
    write_json(cfg.out / "equilibrium.json", payload)
    return EXIT_OK


def _problem(cfg: RunConfig):
    if cfg.has("single"):
        return SingleSegmentProblem(GameConfig.from_dict(_read_json(cfg.path("single"))),
                                    **cfg.solver_kwargs())
    if cfg.has("corridor"):
        network, pops, _ = load_corridor(cfg.path("corridor"))
        return CorridorProblem(network, pops, _multipliers(cfg, network),
                               resolution=cfg.resolution, **cfg.solver_kwargs())
    if cfg.has("scenario"):
        scenario = load_scenario(cfg.path("scenario"))
        hour = cfg.hour if cfg.hour is not None else scenario.peak_hour
        if hour not in scenario.hourly_demand:
            raise InputError(f"scenario has no hour {hour}")
        return scenario.problem(hour, resolution=cfg.resolution, **cfg.solver_kwargs())
    raise InputError("design needs a 'single', 'corridor' or 'scenario' input")


def _run_design(cfg: RunConfig):
    problem = _problem(cfg)
    size = cfg.grid.size(problem.n_segments)
    print(f"grid: {len(cfg.grid.prices())} prices x {len(cfg.grid.rho_options)} rho "
          f"x {problem.n_segments} segments = {size} designs ({cfg.mode} mode)")
    return enumerate_designs(cfg.grid, problem, cfg.objectives, cfg.jobs, cfg.mode)


def cmd_design(cfg: RunConfig) -> int:
    result = _run_design(cfg)
    E = len(result.points[0].prices)
    write_csv(cfg.out / "design_points.csv", _design_header(E),
              [_design_row(p) for p in result.points])
    write_csv(cfg.out / "design_best.csv", ["objective"] + _design_header(E),
              [[name] + _design_row(result.best[name]) for name in cfg.objectives])
    failed = [[*prices, rho, msg] for prices, rho, msg in result.failures]
    if failed:
        write_csv(cfg.out / "design_failures.csv",
                  [f"price_e{e}" for e in range(1, E + 1)] + ["rho", "error"], failed)
    print(f"evaluated={result.evaluated} failures={len(result.failures)}")
    for name in cfg.objectives:
        p = result.best[name]
        print(f"best {name}: prices={list(p.prices)} rho={p.rho!r} value={p.objective(name)!r}")
    return EXIT_OK


def _read_design_points(path: Path) -> list[DesignPoint]:
    with path.open(newline="") as handle:
        reader = csv.DictReader(handle)
        names = reader.fieldnames or []
        price_cols = sorted((c for c in names if c.startswith("price_e")),
                            key=lambda c: int(c[len("price_e"):]))
        needed = ["rho", *OBJECTIVES]
        if not price_cols or any(c not in names for c in needed):
            raise InputError(f"{path}: expected columns {','.join(_design_header(1))}")
        points = []
        for row in reader:
            try:
                points.append(DesignPoint(
                    tuple(float(row[c]) for c in price_cols), float(row["rho"]),
                    *(float(row[k]) for k in OBJECTIVES), row.get("regime_info", "")))
            except ValueError as err:
                raise InputError(f"{path}:{reader.line_num}: {err}") from err
    if not points:
        raise InputError(f"{path}: no design points")
    return points


def cmd_pareto(cfg: RunConfig) -> int:
    if cfg.has("design_points"):
        points = _read_design_points(cfg.path("design_points"))
    else:
        points = _run_design(cfg).points
    E = len(points[0].prices)
    for name in (o for o in cfg.objectives if o != "revenue"):
        for rho in sorted({p.rho for p in points}):
            subset = [p for p in points if p.rho == rho]
            front = pareto_front(subset, name)
            write_csv(cfg.out / f"pareto_{name}_rho{rho!r}.csv", _design_header(E),
                      [_design_row(p) for p in front])
            print(f"pareto {name} rho={rho!r}: {len(front)} of {len(subset)} points")
    return EXIT_OK


def cmd_hourly(cfg: RunConfig) -> int:
    # Without a scenario input the shipped synthetic corridor is used.
    scenario = load_scenario(cfg.path("scenario") if cfg.has("scenario") else None)
    hours = cfg.hours if cfg.hours is not None else scenario.hours
    for h in hours:
        if h not in scenario.hourly_demand or h not in scenario.baseline_prices:
            raise InputError(f"scenario lacks demand or baseline prices for hour {h}")
    problems = {h: scenario.problem(h, resolution=cfg.resolution, **cfg.solver_kwargs())
                for h in hours}
    baseline = {h: scenario.baseline(h) for h in hours}
    results = hourly_design(cfg.grid, problems, baseline, cfg.objectives, cfg.jobs, cfg.mode)
    E = scenario.network.E
    rows = []
    for r in results:
        for name in cfg.objectives:
            best = r.best[name]
            rows.append([r.hour, name, best.rho, *best.prices, best.objective(name),
                         r.baseline.objective(name), r.improvement[name],
                         r.improvement_pct[name]])
    write_csv(cfg.out / "hourly_design.csv",
              ["hour", "objective", "rho"] + [f"price_e{e}" for e in range(1, E + 1)]
              + ["optimal_value", "baseline_value", "improvement", "improvement_pct"], rows)
    print(f"hours={len(results)} objectives={len(cfg.objectives)}")
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "fit-latency": cmd_fit_latency,
    "estimate-demand": cmd_estimate_demand,
    "solve": cmd_solve,
    "design": cmd_design,
    "pareto": cmd_pareto,
    "hourly": cmd_hourly,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hotlane", description="HOT-lane equilibrium, calibration and toll design.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "ingest": "aggregate 5-minute sensor data into hourly flows and latencies",
        "fit-latency": "fit BPR latency parameters per segment",
        "estimate-demand": "estimate per-population demand masses",
        "solve": "solve a single-segment or corridor equilibrium",
        "design": "enumerate toll designs and report the best per objective",
        "pareto": "Pareto fronts of each objective against revenue",
        "hourly": "optimal hourly tolls and improvements over the baseline",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--jobs", type=int, help="worker processes")
        p.add_argument("--tol", type=float, help="solver tolerance")
        p.add_argument("--resolution", type=int, help="quadrature points per axis")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, args)
        return COMMANDS[args.command](cfg)
    except (NonConvergenceError, RegimeInconsistencyError, DesignError) as err:
        print(f"error: {err}", file=sys.stderr)
        trace = getattr(err, "trace", None)
        if trace:
            tail = ", ".join(f"{v:.3e}" for v in trace[-10:])
            print(f"residual trace (last {min(len(trace), 10)}): {tail}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (InputError, IngestionError, DomainError, SingularFitError, InfeasibleFitError,
            OSError, KeyError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
