from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from hotlane.latency import LatencyParams, SegmentSpec
from hotlane.multi import Network, Population
from hotlane.preferences import PreferenceDistribution
from hotlane.single import GameConfig

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

FIXTURES = Path(__file__).resolve().parent / "fixtures"
GOLDEN = Path(__file__).resolve().parent / "golden"


def unit_square() -> PreferenceDistribution:
    return PreferenceDistribution.uniform((0.0, 1.0), ((0.0, 1.0),))


def basic_config(tau=0.5, rho=0.5, D=1.0, A=2, a=1.0, b0=1.0, prefs=None) -> GameConfig:
    """Single-segment game with linear latency b0 + a * flow / share."""
    return GameConfig(D, tau, rho, A, LatencyParams.linear(a, b0), prefs or unit_square())


def random_config(rng: np.random.Generator) -> GameConfig:
    """Random single-segment instance with a BPR latency and a 2x2 cube grid."""
    beta_edges = np.cumsum(np.r_[0.0, rng.uniform(0.2, 1.0, 2)])
    gamma_edges = np.cumsum(np.r_[0.0, rng.uniform(0.2, 1.5, 2)])
    masses = rng.uniform(0.2, 1.0, (2, 2))
    prefs = PreferenceDistribution.grid(beta_edges, gamma_edges, masses)
    latency = LatencyParams(rng.uniform(2.0, 10.0), rng.uniform(2e-4, 1e-3), 4.0)
    return GameConfig(float(rng.uniform(500, 4000)), float(rng.uniform(0.05, 3.0)),
                      float(rng.uniform(0.15, 0.85)), int(rng.integers(2, 4)), latency, prefs)


def desk_network(rho: float = 0.25) -> Network:
    segs = (
        SegmentSpec(1, 2.0, 4, LatencyParams(2.0, 1.0 / 5400.0, 4.0)),
        SegmentSpec(2, 3.0, 4, LatencyParams(3.0, 1.0 / 5400.0, 4.0)),
    )
    return Network(segs, 2, rho)


def desk_populations(scale: float = 1.0) -> list[Population]:
    prefs = PreferenceDistribution.grid([0.0, 0.5, 1.0], [0.0, 1.0, 2.0],
                                        np.array([[0.3, 0.2], [0.15, 0.35]]))
    return [Population(1, 2, 2500.0 * scale, prefs), Population(2, 2, 1500.0 * scale, prefs)]


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# Acceptance summary ---------------------------------------------------------------------------

_CRITERIA: dict[int, list[tuple[str, bool]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _CRITERIA.setdefault(marker.args[0], []).append((item.name, report.passed))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        results = _CRITERIA[number]
        failed = [name for name, ok in results if not ok]
        status = "FAIL" if failed else "PASS"
        detail = f" (failing: {', '.join(failed)})" if failed else ""
        terminalreporter.write_line(
            f"criterion {number:2d}: {status} [{len(results) - len(failed)}/{len(results)}"
            f" checks]{detail}")
