"""Multi-segment, multi-occupancy HOT lane equilibrium.

A corridor is a line of segments ``1..E``.  A population enters at segment
``i`` and leaves after segment ``j``.  Each traveler picks an occupancy level
``m`` and, on every segment it crosses, either the ordinary or the HOT lane.
Tolls are charged per vehicle and split evenly among its ``m`` occupants.

Given the vector ``delta`` of ordinary-minus-HOT latency differences, the
best response of a traveler with value of time ``beta`` and carpool
disutilities ``gamma`` uses the HOT lane on segment ``e`` at level ``m``
exactly when ``beta * delta_e > tau_{e,m} / m`` and picks the level
minimizing ``sum_e min(tau_{e,m} / m, beta * delta_e) + gamma_m``.  The
equilibrium is a fixed point of the map ``Phi`` that sends ``delta`` to the
latency difference induced by those best responses.

Integration over the preference cubes is piecewise exact: the beta axis is
cut where a lane choice flips, and on each piece the occupancy probabilities
are integrated in closed form over gamma (for up to three occupancy levels)
with Gauss-Legendre nodes placed between every kink of the integrand.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from scipy.optimize import brentq, root

from .exceptions import DomainError, NonConvergenceError
from .latency import SegmentSpec, _as_rho, bpr_latency
from .preferences import DEFAULT_RESOLUTION, PreferenceDistribution

DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 5000
_STALL_WINDOW = 25
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(3)
_CHUNK = 2048


@dataclass(frozen=True)
class Network:
    """Corridor of segments sharing one HOT capacity share ``rho``.

    ``occupancy_levels`` lists the vehicle occupancies available to travelers;
    it defaults to ``1..max_occupancy_M``.
    """

    segments: tuple[SegmentSpec, ...]
    max_occupancy_M: int
    rho: float
    occupancy_levels: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        segments = tuple(self.segments)
        object.__setattr__(self, "segments", segments)
        object.__setattr__(self, "rho", _as_rho(self.rho))
        if not segments:
            raise DomainError("a network needs at least one segment")
        if [s.id for s in segments] != list(range(1, len(segments) + 1)):
            raise DomainError("segment ids must be 1..E in order")
        if self.max_occupancy_M < 1:
            raise DomainError("max_occupancy_M must be at least 1")
        levels = self.occupancy_levels
        if levels is None:
            levels = tuple(range(1, self.max_occupancy_M + 1))
        levels = tuple(int(v) for v in levels)
        if len(levels) != self.max_occupancy_M or levels[0] != 1 or any(
            b <= a for a, b in zip(levels, levels[1:])
        ):
            raise DomainError("occupancy levels must start at 1 and increase")
        object.__setattr__(self, "occupancy_levels", levels)

    @property
    def E(self) -> int:
        return len(self.segments)

    @property
    def levels(self) -> np.ndarray:
        return np.array(self.occupancy_levels, dtype=float)

    def with_rho(self, rho: float) -> "Network":
        return Network(self.segments, self.max_occupancy_M, rho, self.occupancy_levels)

    def to_dict(self) -> dict:
        return {
            "segments": [s.to_dict() for s in self.segments],
            "max_occupancy_M": self.max_occupancy_M,
            "rho": self.rho,
            "occupancy_levels": list(self.occupancy_levels),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Network":
        levels = data.get("occupancy_levels")
        return cls(
            tuple(SegmentSpec.from_dict(s) for s in data["segments"]),
            int(data["max_occupancy_M"]),
            float(data["rho"]),
            tuple(levels) if levels is not None else None,
        )


@dataclass(frozen=True)
class Population:
    """Travelers entering at segment ``entry_i`` and leaving after ``exit_j``."""

    entry_i: int
    exit_j: int
    demand: float
    preferences: PreferenceDistribution

    def __post_init__(self) -> None:
        if not (1 <= self.entry_i <= self.exit_j):
            raise DomainError("population needs 1 <= entry_i <= exit_j")
        if not (math.isfinite(self.demand) and self.demand >= 0):
            raise DomainError("population demand must be non-negative")

    @property
    def span(self) -> slice:
        return slice(self.entry_i - 1, self.exit_j)

    def with_demand(self, demand: float) -> "Population":
        return Population(self.entry_i, self.exit_j, float(demand), self.preferences)

    def to_dict(self) -> dict:
        return {
            "entry_i": self.entry_i,
            "exit_j": self.exit_j,
            "demand": self.demand,
            "preferences": self.preferences.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Population":
        return cls(
            int(data["entry_i"]),
            int(data["exit_j"]),
            float(data["demand"]),
            PreferenceDistribution.from_dict(data["preferences"]),
        )


@dataclass(frozen=True)
class TollSchedule:
    """Vehicle tolls ``tau[e, m] = base_price[e] * occupancy_multiplier[m]``."""

    base_price: tuple[float, ...]
    occupancy_multiplier: tuple[float, ...] = (1.0, 0.5, 0.0)

    def __post_init__(self) -> None:
        base = tuple(float(v) for v in self.base_price)
        mult = tuple(float(v) for v in self.occupancy_multiplier)
        object.__setattr__(self, "base_price", base)
        object.__setattr__(self, "occupancy_multiplier", mult)
        if any(not math.isfinite(v) or v < 0 for v in base):
            raise DomainError("base prices must be non-negative")
        if any(not (0.0 <= v <= 1.0) for v in mult):
            raise DomainError("occupancy multipliers must lie in [0, 1]")

    def tau(self) -> np.ndarray:
        """Vehicle toll array of shape (E, M)."""
        return np.outer(self.base_price, self.occupancy_multiplier)

    def per_agent(self, network: Network) -> np.ndarray:
        """Toll paid by each occupant, shape (E, M)."""
        self.check(network)
        return self.tau() / network.levels[None, :]

    def check(self, network: Network) -> None:
        if len(self.base_price) != network.E:
            raise DomainError("one base price per segment is required")
        if len(self.occupancy_multiplier) != network.max_occupancy_M:
            raise DomainError("one multiplier per occupancy level is required")

    def to_dict(self) -> dict:
        return {
            "base_price": list(self.base_price),
            "occupancy_multiplier": list(self.occupancy_multiplier),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TollSchedule":
        return cls(
            tuple(data["base_price"]),
            tuple(data.get("occupancy_multiplier", (1.0, 0.5, 0.0))),
        )


@dataclass(frozen=True)
class MultiAction:
    """Occupancy level plus a lane ("ordinary" or "hot") per segment crossed."""

    occupancy: int
    lane_choice: tuple[str, ...]


@dataclass(frozen=True)
class FlowVector:
    """Vehicle flows per segment on ordinary (``x_o``) and HOT (``x_h``) lanes."""

    x_o: np.ndarray
    x_h: np.ndarray

    def to_dict(self) -> dict:
        return {"x_o": [float(v) for v in self.x_o], "x_h": [float(v) for v in self.x_h]}


@dataclass
class CorridorState:
    """Aggregates of the best responses to a fixed ``delta``.

    Flows are per segment.  ``agents_*`` count travelers rather than vehicles
    and ``beta_*`` weight each traveler by its value of time.
    """

    delta: np.ndarray
    x_o: np.ndarray
    x_h: np.ndarray
    agents_o: np.ndarray
    agents_h: np.ndarray
    beta_o: np.ndarray
    beta_h: np.ndarray
    revenue: float
    gamma_cost: float
    level_agents: np.ndarray
    hot_vehicles_by_level: np.ndarray


@dataclass
class MultiEquilibrium:
    """Converged fixed point of the corridor game."""

    delta: np.ndarray
    flows: FlowVector
    latencies_o: np.ndarray
    latencies_h: np.ndarray
    residual: float
    iterations: int
    trace: list = field(default_factory=list, repr=False)
    state: CorridorState | None = field(default=None, repr=False)
    tolls: TollSchedule | None = field(default=None, repr=False)
    network: Network | None = field(default=None, repr=False)
    populations: tuple = field(default=(), repr=False)

    def to_dict(self) -> dict:
        return {
            "delta": [float(v) for v in self.delta],
            "flows": self.flows.to_dict(),
            "latencies": {
                "l_o": [float(v) for v in self.latencies_o],
                "l_h": [float(v) for v in self.latencies_h],
            },
            "residual": float(self.residual),
            "iterations": int(self.iterations),
            "trace": [float(v) for v in self.trace],
            "population_shares": self.population_shares(),
        }

    def population_shares(self, resolution: int = DEFAULT_RESOLUTION) -> list[dict]:
        """Share of each population at every occupancy level and HOT use per segment.

        On free segments (``delta_e = 0`` with no single-occupancy toll)
        travelers are indifferent between lanes; their HOT share there is
        reported from the tie-break rule, while the equilibrium flows use the
        latency-equalizing split.
        """
        if self.network is None or self.tolls is None:
            return []
        out = []
        for pop in self.populations:
            res = integrate_population(self.delta, self.tolls, pop, self.network, resolution)
            w = pop.preferences.masses
            level = np.einsum("km,k->m", res["level"][0], w)
            hot = np.einsum("kml,k->ml", res["hot"][0], w)
            out.append({
                "entry_i": pop.entry_i,
                "exit_j": pop.exit_j,
                "level": [float(v) for v in level],
                "hot": [[float(v) for v in row] for row in hot],
            })
        return out


# Best response of a single traveler ---------------------------------------------

def best_response(
    delta,
    tolls: TollSchedule,
    pop: Population,
    beta: float,
    gamma,
    levels: Sequence[int] | None = None,
) -> MultiAction:
    """Deterministic best response of one traveler.

    ``gamma`` lists the disutilities of levels ``2..M`` (a leading zero for
    level 1 is accepted).  Lane ties go to the ordinary lane and occupancy
    ties to the smallest level.
    """
    delta = np.asarray(delta, dtype=float)
    M = len(tolls.occupancy_multiplier)
    levels = np.arange(1, M + 1, dtype=float) if levels is None else np.asarray(levels, float)
    gamma = np.asarray(gamma, dtype=float).ravel()
    if gamma.size == M - 1:
        gamma = np.concatenate([[0.0], gamma])
    if gamma.size != M:
        raise DomainError("gamma needs one entry per occupancy level above 1")
    d = delta[pop.span]
    tpa = (np.asarray(tolls.base_price, float)[pop.span, None]
           * np.asarray(tolls.occupancy_multiplier)[None, :] / levels[None, :])
    hot = beta * d[:, None] > tpa
    costs = np.where(hot, tpa, beta * d[:, None]).sum(axis=0) + gamma
    m = int(np.argmin(costs))
    lanes = tuple("hot" if h else "ordinary" for h in hot[:, m])
    return MultiAction(int(levels[m]), lanes)


# Piecewise-exact integration ------------------------------------------------------

def _F(u):
    return np.where(u <= 0, 0.0, np.where(u < 1, 0.5 * u * u, u - 0.5))


def _H(u):
    return np.where(u <= 0, 0.0, np.where(u < 1, u ** 3 / 3.0, 1.0 / 3.0 + 0.5 * (u * u - 1.0)))


def _K(u):
    return np.where(u <= 0, 0.0, np.where(u < 1, u ** 3 / 3.0, u - 2.0 / 3.0))


def _clip01(u):
    return np.clip(u, 0.0, 1.0)


def _kink_values(lo: np.ndarray, w: np.ndarray, M: int):
    """Pairs (which linear form, target values per cube) where integrands kink."""
    if M == 2:
        a2, w2 = lo[:, 1], w[:, 1]
        return [(0, np.stack([a2, a2 + w2], axis=-1))]
    if M == 3:
        a2, w2, a3, w3 = lo[:, 1], w[:, 1], lo[:, 2], w[:, 2]
        return [
            (0, np.stack([a2, a2 + w2], axis=-1)),
            (1, np.stack([a3, a3 + w3], axis=-1)),
            (2, np.stack([a3 - a2, a3 + w3 - a2, a3 - a2 - w2, a3 + w3 - a2 - w2], axis=-1)),
        ]
    return []


def _gamma_closed_form(c: np.ndarray, lo: np.ndarray, w: np.ndarray, M: int):
    """Occupancy probabilities and the gamma cost given level costs ``c``.

    ``c`` has shape (N, K, P, Q, M) and excludes gamma.  ``lo`` and ``w``
    have shape (K, dim) and are broadcast over the other axes.
    """
    def cube(arr):
        return arr[None, :, None, None]

    if M == 1:
        return np.ones(c.shape), np.zeros(c.shape[:-1])
    a2, w2 = cube(lo[:, 1]), cube(w[:, 1])
    d2 = c[..., 0] - c[..., 1]
    if M == 2:
        U = np.clip(d2, a2, a2 + w2)
        p2 = (U - a2) / w2
        gamma_cost = (U - a2) * (U + a2) / (2.0 * w2)
        return np.stack([1.0 - p2, p2], axis=-1), gamma_cost
    a3, w3 = cube(lo[:, 2]), cube(w[:, 2])
    d3 = c[..., 0] - c[..., 2]
    e23 = c[..., 1] - c[..., 2]
    s2 = 1.0 - _clip01((d2 - a2) / w2)
    s3 = 1.0 - _clip01((d3 - a3) / w3)
    p1 = s2 * s3
    U = np.clip(d2, a2, a2 + w2)
    u_hi = (U + e23 - a3) / w3
    u_lo = (a2 + e23 - a3) / w3
    dF = _F(u_hi) - _F(u_lo)
    dH = _H(u_hi) - _H(u_lo)
    dK = _K(u_hi) - _K(u_lo)
    p2 = ((U - a2) - w3 * dF) / w2
    p2 = np.clip(p2, 0.0, 1.0 - p1)
    p3 = np.clip(1.0 - p1 - p2, 0.0, 1.0)
    q2 = ((U - a2) * (U + a2) * 0.5 - w3 * (a3 - e23) * dF - w3 * w3 * dH) / w2
    C3 = np.clip(d3, a3, a3 + w3)
    g3_lvl1 = s2 * (a3 + w3 - C3) * (a3 + w3 + C3) / (2.0 * w3)
    g3_lvl2 = ((2.0 * a3 + w3) * (U - a2) - 2.0 * a3 * w3 * dF - w3 * w3 * dK) / (2.0 * w2)
    q3 = (a3 + 0.5 * w3) - g3_lvl1 - g3_lvl2
    return np.stack([p1, p2, p3], axis=-1), q2 + q3


def _gamma_grid(c: np.ndarray, lo: np.ndarray, w: np.ndarray, M: int, resolution: int):
    """Midpoint-grid fallback over gamma for four or more occupancy levels."""
    N, K, P, Q, _ = c.shape
    probs = np.zeros(c.shape)
    gamma_cost = np.zeros(c.shape[:-1])
    frac = (np.arange(resolution) + 0.5) / resolution
    for k in range(K):
        axes = [lo[k, d] + frac * w[k, d] for d in range(1, M)]
        mesh = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=-1)
        gam = np.concatenate([np.zeros((len(mesh), 1)), mesh], axis=1)  # (G, M)
        total = c[:, k][..., None, :] + gam  # (N, P, Q, G, M)
        choice = np.argmin(total, axis=-1)
        onehot = choice[..., None] == np.arange(M)
        probs[:, k] = onehot.mean(axis=-2)
        gamma_cost[:, k] = np.take_along_axis(
            np.broadcast_to(gam, total.shape), choice[..., None], axis=-1
        )[..., 0].mean(axis=-1)
    return probs, gamma_cost


def _integrate(delta: np.ndarray, tpa: np.ndarray, lo: np.ndarray, hi: np.ndarray,
               resolution: int = DEFAULT_RESOLUTION) -> dict:
    """Integrate best responses over each preference cube.

    Parameters
    ----------
    delta:
        (N, L) latency differences on the segments a population crosses.
    tpa:
        (L, M) per-occupant tolls.
    lo, hi:
        (K, dim) cube corners.

    Returns arrays of cube-normalized masses: ``level`` (N, K, M),
    ``level_beta`` (N, K, M), ``hot`` (N, K, M, L), ``hot_beta`` (N, K, M, L)
    and ``gamma`` (N, K).
    """
    N, L = delta.shape
    M = tpa.shape[1]
    K = lo.shape[0]
    w = hi - lo
    bl, bh, wb = lo[:, 0], hi[:, 0], w[:, 0]
    t = tpa.T  # (M, L)

    with np.errstate(divide="ignore", invalid="ignore"):
        bp = np.where(delta[:, None, :] > 0, t[None] / delta[:, None, :], -np.inf)
    bp = bp.reshape(N, 1, M * L)
    bp = np.clip(bp, bl[None, :, None], bh[None, :, None])
    edges = np.concatenate(
        [np.broadcast_to(bl[None, :, None], (N, K, 1)), bp,
         np.broadcast_to(bh[None, :, None], (N, K, 1))], axis=-1)
    edges = np.sort(edges, axis=-1)
    plo, phi_ = edges[..., :-1], edges[..., 1:]  # (N, K, P)
    mid = 0.5 * (plo + phi_)
    hot = mid[..., None, None] * delta[:, None, None, None, :] > t[None, None, None]
    A = np.where(hot, t[None, None, None], 0.0).sum(-1)  # (N, K, P, M)
    B = np.where(hot, 0.0, delta[:, None, None, None, :]).sum(-1)

    # Kinks of the gamma integrals along beta inside each piece.
    pieces = [plo[..., None], phi_[..., None]]
    forms = [(0, 1), (0, 2), (1, 2)]
    for which, targets in _kink_values(lo, w, M):
        i, j = forms[which]
        alpha = A[..., i] - A[..., j]
        kappa = B[..., i] - B[..., j]
        with np.errstate(divide="ignore", invalid="ignore"):
            kb = (targets[None, :, None, :] - alpha[..., None]) / kappa[..., None]
        kb = np.where(np.isfinite(kb), kb, plo[..., None])
        pieces.append(np.clip(kb, plo[..., None], phi_[..., None]))
    if M >= 4:
        frac = np.linspace(0.0, 1.0, 5)[1:-1]
        pieces.append(plo[..., None] + frac * (phi_ - plo)[..., None])
    pts = np.sort(np.concatenate(pieces, axis=-1), axis=-1)
    slo, shi = pts[..., :-1], pts[..., 1:]  # (N, K, P, S)
    half = 0.5 * (shi - slo)
    nodes = (slo[..., None] + half[..., None] * (1.0 + _GL_NODES)).reshape(*slo.shape[:-1], -1)
    weights = (half[..., None] * _GL_WEIGHTS).reshape(*slo.shape[:-1], -1)
    weights = weights / wb[None, :, None, None]  # (N, K, P, Q)

    c = A[..., None, :] + B[..., None, :] * nodes[..., None]  # (N, K, P, Q, M)
    if M <= 3:
        probs, gamma_cost = _gamma_closed_form(c, lo, w, M)
    else:
        probs, gamma_cost = _gamma_grid(c, lo, w, M, resolution)
    piece_mass = np.einsum("nkpq,nkpqm->nkpm", weights, probs)
    piece_beta = np.einsum("nkpq,nkpq,nkpqm->nkpm", weights, nodes, probs)
    hot_f = hot.astype(float)
    return {
        "level": piece_mass.sum(axis=2),
        "level_beta": piece_beta.sum(axis=2),
        "hot": np.einsum("nkpm,nkpml->nkml", piece_mass, hot_f),
        "hot_beta": np.einsum("nkpm,nkpml->nkml", piece_beta, hot_f),
        "gamma": np.einsum("nkpq,nkpq->nk", weights, gamma_cost),
    }


def integrate_population(delta, tolls: TollSchedule, pop: Population, network: Network,
                         resolution: int = DEFAULT_RESOLUTION) -> dict:
    """Cube-level best-response masses of one population (see ``_integrate``).

    ``delta`` is a full corridor vector (E,) or a batch (N, E).
    """
    delta = np.atleast_2d(np.asarray(delta, dtype=float))
    tpa = tolls.per_agent(network)[pop.span]
    prefs = pop.preferences
    if prefs.max_occupancy_M != network.max_occupancy_M:
        raise DomainError("population preferences and network disagree on M")
    return _integrate(delta[:, pop.span], tpa, prefs.lower, prefs.upper, resolution)


# Flows and the fixed-point map -----------------------------------------------------

def _check_inputs(tolls, populations, network):
    tolls.check(network)
    for pop in populations:
        if pop.exit_j > network.E:
            raise DomainError("population exits beyond the last segment")


def corridor_state(delta, tolls: TollSchedule, populations: Sequence[Population],
                   network: Network, resolution: int = DEFAULT_RESOLUTION) -> list[CorridorState]:
    """Aggregate best responses for a batch of delta vectors (N, E)."""
    delta = np.atleast_2d(np.asarray(delta, dtype=float))
    _check_inputs(tolls, populations, network)
    N, E = delta.shape
    M = network.max_occupancy_M
    inv = 1.0 / network.levels
    tpa = tolls.per_agent(network)
    x_h = np.zeros((N, E))
    veh_total = np.zeros((N, E))
    a_h = np.zeros((N, E))
    a_total = np.zeros((N, E))
    b_h = np.zeros((N, E))
    b_total = np.zeros((N, E))
    revenue = np.zeros(N)
    gamma_cost = np.zeros(N)
    level_agents = np.zeros((N, M))
    hot_by_level = np.zeros((N, M))
    for pop in populations:
        if pop.demand == 0:
            continue
        res = integrate_population(delta, tolls, pop, network, resolution)
        wk = pop.demand * pop.preferences.masses  # (K,)
        sl = pop.span
        hot_agents = np.einsum("nkml,k->nml", res["hot"], wk)
        level = np.einsum("nkm,k->nm", res["level"], wk)
        x_h[:, sl] += np.einsum("nml,m->nl", hot_agents, inv)
        veh_total[:, sl] += (level @ inv)[:, None]
        a_h[:, sl] += hot_agents.sum(axis=1)
        a_total[:, sl] += level.sum(axis=1)[:, None]
        b_h[:, sl] += np.einsum("nkml,k->nl", res["hot_beta"], wk)
        b_total[:, sl] += np.einsum("nkm,k->n", res["level_beta"], wk)[:, None]
        revenue += np.einsum("nml,lm->n", hot_agents, tpa[sl])
        gamma_cost += res["gamma"] @ wk
        level_agents += level
        hot_by_level += np.einsum("nml,m->nm", hot_agents, inv)
    x_o = np.maximum(veh_total - x_h, 0.0)
    free = free_segments(tolls, populations, network)
    for n, e in zip(*np.nonzero(free[None, :] & (delta == 0.0))):
        total = veh_total[n, e]
        share = _equal_split(total, network.segments[e], network.rho) / total if total > 0 else 0.0
        x_h[n, e] = share * total
        x_o[n, e] = total - x_h[n, e]
        # Travelers are indifferent here; spread them like the vehicles.
        a_h[n, e] = share * a_total[n, e]
        b_h[n, e] = share * b_total[n, e]
    out = []
    for n in range(N):
        out.append(CorridorState(
            delta=delta[n].copy(), x_o=x_o[n], x_h=x_h[n],
            agents_o=np.maximum(a_total[n] - a_h[n], 0.0), agents_h=a_h[n],
            beta_o=np.maximum(b_total[n] - b_h[n], 0.0), beta_h=b_h[n],
            revenue=float(revenue[n]), gamma_cost=float(gamma_cost[n]),
            level_agents=level_agents[n], hot_vehicles_by_level=hot_by_level[n],
        ))
    return out


def _flows_batch(delta, tolls, populations, network, resolution):
    delta = np.atleast_2d(np.asarray(delta, dtype=float))
    N, E = delta.shape
    inv = 1.0 / network.levels
    x_h = np.zeros((N, E))
    total = np.zeros((N, E))
    for pop in populations:
        if pop.demand == 0:
            continue
        res = integrate_population(delta, tolls, pop, network, resolution)
        wk = pop.demand * pop.preferences.masses
        x_h[:, pop.span] += np.einsum("nkml,k,m->nl", res["hot"], wk, inv)
        total[:, pop.span] += np.einsum("nkm,k,m->n", res["level"], wk, inv)[:, None]
    return np.maximum(total - x_h, 0.0), x_h


def induced_flows(delta, tolls: TollSchedule, populations: Sequence[Population],
                  network: Network, resolution: int = DEFAULT_RESOLUTION) -> FlowVector:
    """Vehicle flows induced by best responses to ``delta``."""
    _check_inputs(tolls, populations, network)
    state = corridor_state(np.asarray(delta, float)[None, :], tolls, populations,
                           network, resolution)[0]
    return FlowVector(state.x_o, state.x_h)


def segment_demand(populations: Sequence[Population], network: Network) -> np.ndarray:
    """Total demand crossing each segment."""
    D = np.zeros(network.E)
    for pop in populations:
        D[pop.span] += pop.demand
    return D


def lane_latencies(x_o, x_h, network: Network) -> tuple[np.ndarray, np.ndarray]:
    """Per-segment ordinary and HOT latencies for flows of shape (..., E)."""
    x_o = np.asarray(x_o, dtype=float)
    x_h = np.asarray(x_h, dtype=float)
    if np.any(x_o < 0) or np.any(x_h < 0) or not (
            np.all(np.isfinite(x_o)) and np.all(np.isfinite(x_h))):
        raise DomainError("lane flows must be finite and non-negative")
    params = [seg.latency for seg in network.segments]
    tf = np.array([p.free_flow_time_min for p in params])
    c = np.array([p.congestion_coeff for p in params])
    b = np.array([p.exponent_b for p in params])
    l_o = tf * (1.0 + (c * x_o / (1.0 - network.rho)) ** b)
    l_h = tf * (1.0 + (c * x_h / network.rho) ** b)
    return l_o, l_h


def delta_bounds(populations: Sequence[Population], network: Network):
    """Lower and upper bounds of each segment's latency difference."""
    D = segment_demand(populations, network)
    zeros = np.zeros_like(D)
    l_o0, l_h0 = lane_latencies(zeros, zeros, network)
    l_oD, l_hD = lane_latencies(D, D, network)
    return l_o0 - l_hD, l_oD - l_h0


def free_segments(tolls: TollSchedule, populations: Sequence[Population],
                  network: Network) -> np.ndarray:
    """Boolean mask of loaded segments where single occupancy rides the HOT lane free.

    On such a segment every traveler is indifferent between the lanes when
    the latency difference is zero, so the equilibrium has ``delta_e = 0``
    and the vehicles split to equalize the two latencies.
    """
    tpa = tolls.per_agent(network)
    return (tpa[:, 0] == 0.0) & (segment_demand(populations, network) > 0)


def _equal_split(total: float, seg: SegmentSpec, rho: float) -> float:
    """HOT vehicle flow that equalizes lane latencies for ``total`` vehicles."""
    if total <= 0:
        return 0.0

    def gap(x_h: float) -> float:
        return (bpr_latency(total - x_h, 1.0 - rho, seg.latency)
                - bpr_latency(x_h, rho, seg.latency))

    return float(brentq(gap, 0.0, total, xtol=1e-12 * max(total, 1.0), rtol=1e-15))


def phi_batch(delta, tolls, populations, network, resolution=DEFAULT_RESOLUTION,
              chunk: int = _CHUNK, _bounds=None, _free=None) -> np.ndarray:
    """Evaluate ``Phi`` for a batch of delta vectors of shape (N, E)."""
    delta = np.atleast_2d(np.asarray(delta, dtype=float))
    if _bounds is None:
        _check_inputs(tolls, populations, network)
        lower, upper = delta_bounds(populations, network)
    else:
        lower, upper = _bounds
    out = np.empty_like(delta)
    for start in range(0, len(delta), chunk):
        block = delta[start:start + chunk]
        x_o, x_h = _flows_batch(block, tolls, populations, network, resolution)
        l_o, l_h = lane_latencies(x_o, x_h, network)
        out[start:start + chunk] = np.clip(l_o - l_h, lower, upper)
    free = free_segments(tolls, populations, network) if _free is None else _free
    if free.any():
        # At delta_e = 0 an equal-latency split is available on free segments.
        pinned = free[None, :] & (delta == 0.0)
        out[pinned] = 0.0
    return out


def phi(delta, tolls: TollSchedule, populations: Sequence[Population], network: Network,
        resolution: int = DEFAULT_RESOLUTION) -> np.ndarray:
    """Latency difference induced by the best responses to ``delta``."""
    return phi_batch(np.asarray(delta, float)[None, :], tolls, populations, network,
                     resolution)[0]


def _hybrid_root(delta, evaluate, lower, upper, pinned, trace):
    """Powell hybrid root finding on ``delta - Phi(delta)`` over the unpinned coordinates.

    Returns the better of the start and the hybrid solution.
    """
    active = ~pinned
    start_res = float(np.max(np.abs(evaluate(delta) - delta)))
    if not active.any():
        return delta, start_res, 0

    def embed(v):
        full = delta.copy()
        full[active] = v
        return np.clip(full, lower, upper)

    def gap(v):
        full = embed(v)
        return (full - evaluate(full))[active]

    sol = root(gap, delta[active], method="hybr", options={"xtol": 1e-14})
    cand = embed(sol.x)
    cand_res = float(np.max(np.abs(evaluate(cand) - cand)))
    trace.append(min(cand_res, start_res))
    if cand_res < start_res:
        return cand, cand_res, int(sol.nfev)
    return delta, start_res, int(sol.nfev)


def _coordinate_sweeps(delta, evaluate, lower, upper, pinned, tol, trace,
                       max_sweeps: int = 200):
    """Gauss-Seidel sweeps solving each coordinate equation with Brent's method."""
    delta = delta.copy()
    residual = float(np.max(np.abs(evaluate(delta) - delta)))
    for sweep in range(1, max_sweeps + 1):
        for e in range(len(delta)):
            if pinned[e]:
                continue

            def gap(v, e=e):
                trial = delta.copy()
                trial[e] = v
                return v - evaluate(trial)[e]

            if upper[e] > lower[e]:
                delta[e] = brentq(gap, lower[e], upper[e], xtol=1e-15, rtol=1e-15)
        previous = residual
        residual = float(np.max(np.abs(evaluate(delta) - delta)))
        trace.append(residual)
        if residual < tol or residual >= previous:
            return delta, residual, sweep
    return delta, residual, max_sweeps


def solve_fixed_point(
    tolls: TollSchedule,
    populations: Sequence[Population],
    network: Network,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    damping_init: float = 1.0,
    delta_init=None,
    resolution: int = DEFAULT_RESOLUTION,
    fallback: bool = True,
) -> MultiEquilibrium:
    """Damped Picard iteration ``delta <- (1 - a) delta + a Phi(delta)``.

    The step ``a`` starts at ``damping_init``.  A step that increases the
    residual is undone and ``a`` is halved; three accepted decreases in a row
    double ``a`` again (never above ``damping_init``).  Iteration stops when
    ``max |Phi(delta) - delta| < tol``.

    When the damped iteration stalls (damping underflow, ``max_iter`` steps,
    or less than 10% progress over the last 25 steps) and ``fallback`` is
    true, the solve continues from the stalled point with Powell's hybrid
    method on ``delta - Phi(delta) = 0``.  If that also falls short, it runs
    Gauss-Seidel sweeps that root-find ``delta_e = Phi_e(delta)`` one segment
    at a time.  Each of these scalar equations has a root inside the bounds
    because ``Phi`` maps into them.
    """
    if not (0.0 < damping_init <= 1.0):
        raise DomainError("damping_init must lie in (0, 1]")
    if not tol > 0:
        raise DomainError("tol must be positive")
    populations = tuple(populations)
    _check_inputs(tolls, populations, network)
    lower, upper = delta_bounds(populations, network)
    if delta_init is None:
        delta = 0.5 * (lower + upper)
    else:
        delta = np.clip(np.asarray(delta_init, dtype=float), lower, upper)
    free = free_segments(tolls, populations, network)
    delta = np.where(free, 0.0, delta)

    def evaluate(d):
        return phi_batch(d[None, :], tolls, populations, network, resolution,
                         _bounds=(lower, upper), _free=free)[0]

    alpha = damping_init
    value = evaluate(delta)
    residual = float(np.max(np.abs(value - delta)))
    trace = [residual]
    streak = 0
    iterations = 0
    stall = None
    while residual >= tol:
        if iterations >= max_iter:
            stall = (f"fixed-point iteration stopped at residual {residual:.3e} after "
                     f"{max_iter} steps")
            break
        if fallback and len(trace) > _STALL_WINDOW and residual > 0.9 * trace[-_STALL_WINDOW - 1]:
            stall = f"fixed-point iteration stalled at residual {residual:.3e}"
            break
        iterations += 1
        candidate = np.clip((1.0 - alpha) * delta + alpha * value, lower, upper)
        cand_value = evaluate(candidate)
        cand_res = float(np.max(np.abs(cand_value - candidate)))
        if cand_res >= residual:
            alpha *= 0.5
            streak = 0
            trace.append(residual)
            if alpha < 1e-12:
                stall = "damping underflow in fixed-point iteration"
                break
            continue
        delta, value, residual = candidate, cand_value, cand_res
        trace.append(residual)
        streak += 1
        if streak >= 3:
            alpha = min(2.0 * alpha, damping_init)
            streak = 0
    if stall is not None:
        if not fallback:
            raise NonConvergenceError(stall, residual=residual, trace=trace)
        delta, residual, calls = _hybrid_root(delta, evaluate, lower, upper, free, trace)
        iterations += calls
        if residual >= tol:
            delta, residual, sweeps = _coordinate_sweeps(
                delta, evaluate, lower, upper, free, tol, trace)
            iterations += sweeps
        if residual >= tol:
            raise NonConvergenceError(
                f"{stall}; coordinate sweeps stopped at residual {residual:.3e}",
                residual=residual, trace=trace)
    state = corridor_state(delta, tolls, populations, network, resolution)[0]
    l_o, l_h = lane_latencies(state.x_o, state.x_h, network)
    return MultiEquilibrium(
        delta=delta, flows=FlowVector(state.x_o, state.x_h),
        latencies_o=l_o, latencies_h=l_h, residual=residual,
        iterations=iterations, trace=trace, state=state, tolls=tolls,
        network=network, populations=populations,
    )


def uniqueness_check(
    delta_star,
    tolls: TollSchedule | None = None,
    populations: Sequence[Population] | None = None,
    network: Network | None = None,
    fd_step: float = 1e-6,
    phi_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    bounds: tuple[np.ndarray, np.ndarray] | None = None,
    resolution: int = DEFAULT_RESOLUTION,
    threshold: float = 1e-3,
) -> tuple[bool, list]:
    """Flag eigenvalues of the Jacobian of ``Phi`` within ``threshold`` of 1.

    The Jacobian is a central finite difference at ``delta_star``.  A custom
    map may be injected through ``phi_fn``; otherwise the corridor map is
    used with its latency-difference bounds.  The step shrinks when it would
    leave the bounds and an error is raised below 1e-10.
    """
    delta_star = np.asarray(delta_star, dtype=float)
    E = delta_star.size
    if phi_fn is None:
        if tolls is None or populations is None or network is None:
            raise DomainError("tolls, populations and network are required")
        populations = tuple(populations)
        if bounds is None:
            bounds = delta_bounds(populations, network)

        def batch(d):
            return phi_batch(d, tolls, populations, network, resolution)
    else:
        def batch(d):
            return np.array([np.asarray(phi_fn(row), dtype=float) for row in d])
    if bounds is None:
        lower = np.full(E, -np.inf)
        upper = np.full(E, np.inf)
    else:
        lower, upper = (np.asarray(b, dtype=float) for b in bounds)
    steps = np.empty(E)
    fixed = upper <= lower
    for e in range(E):
        if fixed[e]:
            # A zero-width coordinate keeps Phi_e constant; its row is zero and
            # its column does not affect the spectrum.
            steps[e] = 1.0
            continue
        h = fd_step
        while delta_star[e] - h < lower[e] or delta_star[e] + h > upper[e]:
            h *= 0.5
            if h < 1e-10:
                raise DomainError("finite-difference step fell below 1e-10")
        steps[e] = h
    shift = np.diag(np.where(fixed, 0.0, steps))
    values = batch(np.concatenate([delta_star + shift, delta_star - shift]))
    jac = (values[:E] - values[E:]).T / (2.0 * steps[None, :])
    eig = np.linalg.eigvals(jac)
    spectrum = [complex(v) if abs(v.imag) > 1e-12 else float(v.real) for v in eig]
    spectrum.sort(key=lambda v: (v.real, v.imag) if isinstance(v, complex) else (v, 0.0))
    flagged = bool(np.any(np.abs(eig - 1.0) < threshold))
    return flagged, spectrum


def load_corridor(path) -> tuple[Network, list[Population], TollSchedule]:
    """Read a corridor problem (network, populations, tolls) from JSON."""
    data = json.loads(Path(path).read_text())
    network = Network.from_dict(data["network"])
    pops = [Population.from_dict(p) for p in data["populations"]]
    tolls = TollSchedule.from_dict(data["tolls"])
    return network, pops, tolls
