"""Equilibrium, calibration and toll design for high-occupancy toll lanes."""

from __future__ import annotations

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
from .latency import (
    BPRRegressor,
    CapacitySplit,
    LatencyParams,
    SegmentSpec,
    bpr_latency,
    fit_bpr,
    latency_difference,
)
from .preferences import (
    Halfspace,
    HalfspaceRegion,
    PreferenceCube,
    PreferenceDistribution,
    partition_masses,
    region_mass,
)
from .single import (
    EquilibriumResult,
    GameConfig,
    Regime,
    StrategyDistribution,
    best_response_regions,
    classify_regime,
    comparative_sweep,
    solve_equilibrium,
    threshold_distribution,
)
from .multi import (
    CorridorState,
    FlowVector,
    MultiAction,
    MultiEquilibrium,
    Network,
    Population,
    TollSchedule,
    best_response,
    corridor_state,
    delta_bounds,
    induced_flows,
    phi,
    solve_fixed_point,
    uniqueness_check,
)

from .calibration import (
    DemandEstimate,
    HourlyAggregate,
    SensorPlacement,
    SensorRecord,
    aggregate_hourly,
    best_response_from_data,
    estimate_demand,
    fit_segment_latencies,
    projected_gradient_nnls,
    validate_daily_ratios,
)
from .design import (
    CorridorProblem,
    DesignGrid,
    DesignPoint,
    SingleSegmentProblem,
    enumerate_designs,
    hourly_design,
    objective_agent_time,
    objective_revenue,
    objective_total_cost,
    objective_vehicle_time,
    pareto_front,
)

__version__ = "0.1.0"
