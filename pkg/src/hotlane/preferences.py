"""Piecewise-uniform preference distributions and region integration.

A traveler is described by a value of time ``beta`` (dollars per minute) and
carpool disutilities ``gamma_2 .. gamma_M`` (dollars), with ``gamma_1 = 0``.
The density is a mixture of uniform boxes ("cubes").  Regions are
intersections of half-spaces in the coordinates ``(beta, gamma_2, ...)``.

Two-dimensional masses are computed exactly by clipping each box with the
half-planes and taking the polygon area.  Higher dimensions use a midpoint
tensor grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import DomainError

DEFAULT_RESOLUTION = 32


@dataclass(frozen=True)
class PreferenceCube:
    """Uniform box of preferences carrying probability ``density_mass``."""

    beta_range: tuple[float, float]
    gamma_ranges: tuple[tuple[float, float], ...]
    density_mass: float

    def __post_init__(self) -> None:
        b_lo, b_hi = (float(v) for v in self.beta_range)
        object.__setattr__(self, "beta_range", (b_lo, b_hi))
        gammas = tuple((float(lo), float(hi)) for lo, hi in self.gamma_ranges)
        object.__setattr__(self, "gamma_ranges", gammas)
        object.__setattr__(self, "density_mass", float(self.density_mass))
        if not (np.isfinite(b_lo) and np.isfinite(b_hi)) or b_lo < 0 or b_hi <= b_lo:
            raise DomainError(f"invalid beta range {self.beta_range}")
        for lo, hi in gammas:
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo < 0 or hi <= lo:
                raise DomainError(f"invalid gamma range {(lo, hi)}")
        if not np.isfinite(self.density_mass) or self.density_mass < 0:
            raise DomainError("density_mass must be a non-negative number")

    @property
    def dim(self) -> int:
        return 1 + len(self.gamma_ranges)

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.beta_range[0]] + [g[0] for g in self.gamma_ranges])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.beta_range[1]] + [g[1] for g in self.gamma_ranges])


@dataclass(frozen=True)
class PreferenceDistribution:
    """Mixture of uniform cubes for travelers allowed occupancies 1..M."""

    cubes: tuple[PreferenceCube, ...]
    max_occupancy_M: int

    def __post_init__(self) -> None:
        cubes = tuple(self.cubes)
        object.__setattr__(self, "cubes", cubes)
        if self.max_occupancy_M < 1:
            raise DomainError("max_occupancy_M must be at least 1")
        if not cubes:
            raise DomainError("a distribution needs at least one cube")
        for cube in cubes:
            if len(cube.gamma_ranges) != self.max_occupancy_M - 1:
                raise DomainError("every cube needs M - 1 gamma ranges")
        total = sum(c.density_mass for c in cubes)
        if abs(total - 1.0) > 1e-9:
            raise DomainError(f"cube masses sum to {total!r}, expected 1")

    @property
    def dim(self) -> int:
        return self.max_occupancy_M

    @property
    def lower(self) -> np.ndarray:
        """Array of shape (K, dim) with lower corners."""
        return np.array([c.lower for c in self.cubes]).reshape(len(self.cubes), self.dim)

    @property
    def upper(self) -> np.ndarray:
        return np.array([c.upper for c in self.cubes]).reshape(len(self.cubes), self.dim)

    @property
    def masses(self) -> np.ndarray:
        return np.array([c.density_mass for c in self.cubes])

    @property
    def beta_max(self) -> float:
        return float(max(c.beta_range[1] for c in self.cubes))

    def gamma_max(self, level: int = 2) -> float:
        """Upper end of the support of ``gamma_level``."""
        if not 2 <= level <= self.max_occupancy_M:
            raise DomainError(f"no gamma for occupancy level {level}")
        return float(max(c.gamma_ranges[level - 2][1] for c in self.cubes))

    def with_masses(self, masses: Sequence[float]) -> "PreferenceDistribution":
        masses = np.asarray(masses, dtype=float)
        if masses.shape != (len(self.cubes),):
            raise DomainError("one mass per cube is required")
        masses = masses / masses.sum()
        cubes = tuple(
            PreferenceCube(c.beta_range, c.gamma_ranges, float(m))
            for c, m in zip(self.cubes, masses)
        )
        return PreferenceDistribution(cubes, self.max_occupancy_M)

    # Convenience constructors -------------------------------------------------
    @classmethod
    def uniform(cls, beta_range, gamma_ranges=((0.0, 1.0),)) -> "PreferenceDistribution":
        """A single uniform cube."""
        gamma_ranges = tuple(tuple(g) for g in gamma_ranges)
        cube = PreferenceCube(tuple(beta_range), gamma_ranges, 1.0)
        return cls((cube,), len(gamma_ranges) + 1)

    @classmethod
    def grid(cls, beta_edges, gamma_edges, masses) -> "PreferenceDistribution":
        """Two-dimensional grid of cubes; ``masses[i, j]`` sits on beta bin i, gamma bin j."""
        masses = np.asarray(masses, dtype=float)
        masses = masses / masses.sum()
        cubes = []
        for i in range(len(beta_edges) - 1):
            for j in range(len(gamma_edges) - 1):
                cubes.append(
                    PreferenceCube(
                        (beta_edges[i], beta_edges[i + 1]),
                        ((gamma_edges[j], gamma_edges[j + 1]),),
                        masses[i, j],
                    )
                )
        return cls(tuple(cubes), 2)

    @classmethod
    def point_mass(cls, beta: float, gammas: Sequence[float], eps: float = 1e-6):
        """Approximate an atom by a cube of relative width ``eps``."""
        def interval(v: float) -> tuple[float, float]:
            width = eps * max(abs(v), 1.0)
            lo = max(v - 0.5 * width, 0.0)
            return (lo, lo + width)

        cube = PreferenceCube(interval(beta), tuple(interval(g) for g in gammas), 1.0)
        return cls((cube,), len(gammas) + 1)

    @classmethod
    def from_dict(cls, data: dict) -> "PreferenceDistribution":
        cubes = tuple(
            PreferenceCube(
                tuple(c["beta"]), tuple(tuple(g) for g in c["gamma"]), float(c["mass"])
            )
            for c in data["cubes"]
        )
        return cls(cubes, int(data["max_occupancy_M"]))

    def to_dict(self) -> dict:
        return {
            "max_occupancy_M": self.max_occupancy_M,
            "cubes": [
                {
                    "beta": list(c.beta_range),
                    "gamma": [list(g) for g in c.gamma_ranges],
                    "mass": c.density_mass,
                }
                for c in self.cubes
            ],
        }

    @classmethod
    def from_json(cls, path) -> "PreferenceDistribution":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Halfspace:
    """The set ``coeffs . p (relation) const`` with ``relation`` in {"<=", ">="}."""

    coeffs: tuple[float, ...]
    const: float
    relation: str = "<="

    def __post_init__(self) -> None:
        coeffs = tuple(float(c) for c in self.coeffs)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "const", float(self.const))
        if self.relation not in ("<=", ">="):
            raise DomainError(f"unknown relation {self.relation!r}")
        if not all(np.isfinite(coeffs)):
            raise DomainError("half-space coefficients must be finite")

    def as_leq(self) -> tuple[np.ndarray, float]:
        """Return ``(a, c)`` such that the set is ``a . p <= c``."""
        a = np.array(self.coeffs)
        if self.relation == ">=":
            return -a, -self.const
        return a, self.const


@dataclass(frozen=True)
class HalfspaceRegion:
    """Intersection of half-spaces; an empty list means the whole space."""

    inequalities: tuple[Halfspace, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "inequalities", tuple(self.inequalities))

    @property
    def dim(self) -> int | None:
        if not self.inequalities:
            return None
        return len(self.inequalities[0].coeffs)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Closed-inequality membership for an array of points (..., dim)."""
        points = np.asarray(points, dtype=float)
        inside = np.ones(points.shape[:-1], dtype=bool)
        for h in self.inequalities:
            a, c = h.as_leq()
            inside &= points @ a <= c
        return inside


def _check_dims(dist: PreferenceDistribution, region: HalfspaceRegion) -> None:
    for h in region.inequalities:
        if len(h.coeffs) != dist.dim:
            raise DomainError(
                f"region has dimension {len(h.coeffs)} but preferences have {dist.dim}"
            )


# Exact planar integration ------------------------------------------------------

_UNIT_SQUARE = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]


def _clip(poly: list, a0: float, a1: float, c: float) -> list:
    """Clip a convex polygon to ``a0 u + a1 v <= c``."""
    if not poly:
        return poly
    out = []
    n = len(poly)
    vals = [a0 * u + a1 * v - c for u, v in poly]
    for k in range(n):
        p, q = poly[k], poly[(k + 1) % n]
        fp, fq = vals[k], vals[(k + 1) % n]
        if fp <= 0:
            out.append(p)
        if (fp < 0 < fq) or (fq < 0 < fp):
            t = fp / (fp - fq)
            out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def _polygon_moments(poly: list) -> tuple[float, float, float]:
    """Area and first moments (integral of u, integral of v) of a polygon."""
    if len(poly) < 3:
        return 0.0, 0.0, 0.0
    area = mu = mv = 0.0
    n = len(poly)
    for k in range(n):
        u0, v0 = poly[k]
        u1, v1 = poly[(k + 1) % n]
        cross = u0 * v1 - u1 * v0
        area += cross
        mu += (u0 + u1) * cross
        mv += (v0 + v1) * cross
    return 0.5 * area, mu / 6.0, mv / 6.0


def _cube_polygon(lo: np.ndarray, width: np.ndarray, region: HalfspaceRegion) -> list:
    poly = list(_UNIT_SQUARE)
    for h in region.inequalities:
        a, c = h.as_leq()
        # Work in unit-square coordinates p = lo + width * u.
        a0, a1 = a[0] * width[0], a[1] * width[1]
        rhs = c - float(a @ lo)
        scale = max(abs(a0), abs(a1))
        if scale == 0.0:
            if rhs < 0:
                return []
            continue
        poly = _clip(poly, a0 / scale, a1 / scale, rhs / scale)
        if not poly:
            return []
    return poly


def _exact_moments(dist: PreferenceDistribution, region: HalfspaceRegion) -> np.ndarray:
    lower, upper, masses = dist.lower, dist.upper, dist.masses
    total = np.zeros(3)
    for k in range(len(dist.cubes)):
        width = upper[k] - lower[k]
        poly = _cube_polygon(lower[k], width, region)
        area, mu, mv = _polygon_moments(poly)
        area = min(max(area, 0.0), 1.0)
        if area == 0.0:
            continue
        total[0] += masses[k] * area
        total[1] += masses[k] * (lower[k][0] * area + width[0] * mu)
        total[2] += masses[k] * (lower[k][1] * area + width[1] * mv)
    return total


# Grid quadrature -------------------------------------------------------------

def _cube_grid(lo: np.ndarray, hi: np.ndarray, resolution: int) -> np.ndarray:
    axes = [lo[d] + (np.arange(resolution) + 0.5) / resolution * (hi[d] - lo[d])
            for d in range(len(lo))]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _grid_assign(dist, regions, resolution):
    """Yield (cube weight per point, points, region index per point)."""
    lower, upper, masses = dist.lower, dist.upper, dist.masses
    for k in range(len(dist.cubes)):
        pts = _cube_grid(lower[k], upper[k], resolution)
        label = np.full(len(pts), -1)
        for r, region in enumerate(regions):
            free = label < 0
            if not free.any():
                break
            hit = region.contains(pts[free])
            idx = np.flatnonzero(free)[hit]
            label[idx] = r
        yield masses[k] / len(pts), pts, label


def region_moments(
    dist: PreferenceDistribution,
    region: HalfspaceRegion,
    resolution: int = DEFAULT_RESOLUTION,
) -> np.ndarray:
    """Mass and first moments of the density restricted to ``region``.

    Returns an array ``[mass, E[beta 1_R], E[gamma_2 1_R], ...]``.
    """
    if resolution < 1:
        raise DomainError("resolution must be at least 1")
    _check_dims(dist, region)
    if dist.dim == 2:
        return _exact_moments(dist, region)
    if dist.dim == 1:
        # Only beta: embed in a dummy unit gamma axis.
        lifted = HalfspaceRegion(tuple(
            Halfspace(h.coeffs + (0.0,), h.const, h.relation) for h in region.inequalities
        ))
        cubes = tuple(PreferenceCube(c.beta_range, ((0.0, 1.0),), c.density_mass)
                      for c in dist.cubes)
        return _exact_moments(PreferenceDistribution(cubes, 2), lifted)[:2]
    total = np.zeros(1 + dist.dim)
    for weight, pts, label in _grid_assign(dist, [region], resolution):
        sel = pts[label == 0]
        total[0] += weight * len(sel)
        total[1:] += weight * sel.sum(axis=0)
    return total


def region_mass(
    dist: PreferenceDistribution,
    region: HalfspaceRegion,
    resolution: int = DEFAULT_RESOLUTION,
) -> float:
    """Probability mass of ``region`` under ``dist``.

    Exact for two-dimensional preferences, midpoint quadrature with
    ``resolution`` points per axis per cube otherwise.
    """
    mass = float(region_moments(dist, region, resolution)[0])
    return min(max(mass, 0.0), 1.0)


def partition_masses(
    dist: PreferenceDistribution,
    regions: Sequence[HalfspaceRegion],
    resolution: int = DEFAULT_RESOLUTION,
) -> list[float]:
    """Masses of a list of (essentially) disjoint, exhaustive regions.

    On the grid path each point goes to the first region in list order whose
    closed inequalities hold, so the masses add up exactly.
    """
    if resolution < 1:
        raise DomainError("resolution must be at least 1")
    regions = list(regions)
    for region in regions:
        _check_dims(dist, region)
    if dist.dim <= 2:
        return [region_mass(dist, r, resolution) for r in regions]
    out = np.zeros(len(regions))
    for weight, _, label in _grid_assign(dist, regions, resolution):
        counts = np.bincount(label[label >= 0], minlength=len(regions))
        out += weight * counts
    return [float(v) for v in out]
