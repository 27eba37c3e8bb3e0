from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import FIXTURES, desk_network, desk_populations, unit_square
from hotlane.exceptions import DomainError, NonConvergenceError
from hotlane.latency import LatencyParams, SegmentSpec
from hotlane.multi import (
    Network,
    Population,
    TollSchedule,
    best_response,
    delta_bounds,
    induced_flows,
    lane_latencies,
    load_corridor,
    phi,
    phi_batch,
    segment_demand,
    solve_fixed_point,
    uniqueness_check,
)
from hotlane.preferences import PreferenceCube, PreferenceDistribution, partition_masses
from hotlane.single import (
    GameConfig,
    best_response_regions,
    solve_equilibrium,
    strategy_masses,
)

DESK_TOLLS = TollSchedule((1.0, 1.5), (1.0, 0.5))


def _one_segment(rho=0.3, tf=5.0, c=4e-4):
    return Network((SegmentSpec(1, 2.0, 4, LatencyParams(tf, c, 4.0)),), 2, rho)


# Best response -----------------------------------------------------------------------

def test_zero_delta_goes_ordinary_single_occupancy():
    net = desk_network()
    pop = desk_populations()[0]
    action = best_response([0.0, 0.0], DESK_TOLLS, pop, 0.7, [0.4])
    assert action.occupancy == 1
    assert action.lane_choice == ("ordinary", "ordinary")
    assert net.E == 2


def test_free_high_occupancy_is_chosen():
    prefs = PreferenceDistribution.uniform((0.0, 1.0), ((0.0, 1.0), (0.0, 1.0)))
    pop = Population(1, 2, 100.0, prefs)
    tolls = TollSchedule((2.0, 2.0), (1.0, 0.5, 0.0))
    action = best_response([0.5, 0.3], tolls, pop, 0.4, [0.0, 0.0])
    assert action.occupancy == 3
    assert action.lane_choice == ("hot", "hot")


def test_best_response_reduces_to_two_lane_regions():
    rng = np.random.default_rng(5)
    pop = Population(1, 1, 1.0, unit_square())
    for _ in range(400):
        d, tau = rng.uniform(0.1, 2.0), rng.uniform(0.05, 1.2)
        beta, gamma = rng.random(), rng.random()
        action = best_response([d], TollSchedule((tau,), (1.0, 0.0)), pop, beta, [gamma])
        toll, pool, o = best_response_regions(d, tau, (1.0, 1.0))
        p = np.array([beta, gamma])
        if action.occupancy == 2:
            assert pool.contains(p)
        elif action.lane_choice == ("hot",):
            assert toll.contains(p)
        else:
            assert o.contains(p)


def test_best_response_gamma_validation():
    with pytest.raises(DomainError):
        best_response([0.1, 0.1], DESK_TOLLS, desk_populations()[0], 0.5, [0.1, 0.2, 0.3])


# Flows and Phi -----------------------------------------------------------------------

def test_zero_demand_flows_and_phi():
    net = desk_network()
    pops = desk_populations(scale=0.0)
    flows = induced_flows([0.3, 0.5], DESK_TOLLS, pops, net)
    assert np.all(flows.x_o == 0) and np.all(flows.x_h == 0)
    np.testing.assert_array_equal(phi([0.3, 0.5], DESK_TOLLS, pops, net), [0.0, 0.0])


def test_constant_best_response_flow():
    # Everyone has gamma far above any saving: all drive alone on the ordinary lane.
    prefs = PreferenceDistribution((PreferenceCube((0.0, 0.1), ((50.0, 60.0),), 1.0),), 2)
    net = desk_network()
    pops = [Population(1, 2, 1200.0, prefs)]
    flows = induced_flows([0.5, 0.5], TollSchedule((10.0, 10.0), (1.0, 0.0)), pops, net)
    np.testing.assert_allclose(flows.x_o, [1200.0, 1200.0])
    np.testing.assert_allclose(flows.x_h, [0.0, 0.0])


def _sample(prefs, n, rng):
    idx = rng.choice(len(prefs.cubes), size=n, p=prefs.masses)
    lo, hi = prefs.lower[idx], prefs.upper[idx]
    return lo + rng.random(lo.shape) * (hi - lo)


def _mc_vehicles(delta, tolls, pop, levels, n, rng):
    """Per-agent HOT vehicle contribution on each segment (n, E_span)."""
    pts = _sample(pop.preferences, n, rng)
    beta = pts[:, :1]
    gamma = np.concatenate([np.zeros((n, 1)), pts[:, 1:]], axis=1)
    d = np.asarray(delta)[pop.span]
    tpa = (np.array(tolls.base_price)[pop.span, None]
           * np.array(tolls.occupancy_multiplier)[None, :] / levels[None, :])
    hot = beta[:, :, None] * d[None, :, None] > tpa[None]  # (n, E, M)
    cost = np.where(hot, tpa[None], beta[:, :, None] * d[None, :, None]).sum(axis=1) + gamma
    m = np.argmin(cost, axis=1)
    chosen_hot = hot[np.arange(n), :, m]
    return chosen_hot / levels[m][:, None], 1.0 / levels[m]


def test_flows_match_monte_carlo():
    rng = np.random.default_rng(42)
    net = desk_network()
    pops = desk_populations()
    delta = np.array([0.35, 1.1])
    flows = induced_flows(delta, DESK_TOLLS, pops, net)
    n = 1_000_000
    mean_h = np.zeros(2)
    mean_t = np.zeros(2)
    var_h = np.zeros(2)
    var_o = np.zeros(2)
    for pop in pops:
        hot, veh = _mc_vehicles(delta, DESK_TOLLS, pop, net.levels, n, rng)
        ordinary = veh[:, None] - hot
        sl = pop.span
        mean_h[sl] += pop.demand * hot.mean(axis=0)
        mean_t[sl] += pop.demand * ordinary.mean(axis=0)
        var_h[sl] += pop.demand ** 2 * hot.var(axis=0) / n
        var_o[sl] += pop.demand ** 2 * ordinary.var(axis=0) / n
    assert np.all(np.abs(flows.x_h - mean_h) <= 3 * np.sqrt(var_h) + 1e-9)
    assert np.all(np.abs(flows.x_o - mean_t) <= 3 * np.sqrt(var_o) + 1e-9)


def _single_game(tau, rho=0.3, D=2500.0):
    net = _one_segment(rho)
    cfg = GameConfig(D, tau, rho, 2, net.segments[0].latency, unit_square())
    pops = [Population(1, 1, D, unit_square())]
    return cfg, net, pops, TollSchedule((tau,), (1.0, 0.0))


@given(d=st.floats(0.05, 20.0))
def test_phi_matches_single_segment_map(d):
    cfg, net, pops, tolls = _single_game(0.6)
    s = strategy_masses(d, cfg.toll_tau, cfg.preferences)
    x_h = (s.sigma_toll + s.sigma_pool / 2) * cfg.demand_D
    x_o = s.sigma_o * cfg.demand_D
    l_o, l_h = lane_latencies([x_o], [x_h], net)
    lo, hi = delta_bounds(pops, net)
    expected = np.clip(l_o - l_h, lo, hi)
    np.testing.assert_allclose(phi([d], tolls, pops, net), expected, rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_phi_decreasing_in_own_coordinate(seed):
    rng = np.random.default_rng(seed)
    net = desk_network(rho=float(rng.uniform(0.2, 0.5)))
    pops = desk_populations(scale=float(rng.uniform(0.5, 1.5)))
    tolls = TollSchedule(tuple(rng.uniform(0.2, 2.0, 2)), (1.0, 0.5))
    lo, hi = delta_bounds(pops, net)
    base = rng.uniform(0.0, hi)
    for e in range(2):
        grid = np.repeat(base[None, :], 60, axis=0)
        grid[:, e] = np.linspace(0.0, hi[e], 60)
        values = phi_batch(grid, tolls, pops, net)[:, e]
        assert np.all(np.diff(values) <= 1e-9)


# Fixed point --------------------------------------------------------------------------

@pytest.mark.parametrize("tau", [0.0, 0.2, 0.6, 1.5])
def test_single_segment_reduction(tau):
    cfg, net, pops, tolls = _single_game(tau)
    single = solve_equilibrium(cfg)
    multi = solve_fixed_point(tolls, pops, net)
    assert multi.delta[0] == pytest.approx(single.delta_star, abs=1e-6)
    assert multi.flows.x_h[0] == pytest.approx(single.x_h, rel=1e-6, abs=1e-6)
    assert multi.flows.x_o[0] == pytest.approx(single.x_o, rel=1e-6, abs=1e-6)


def test_zero_demand_solution():
    res = solve_fixed_point(DESK_TOLLS, desk_populations(scale=0.0), desk_network())
    np.testing.assert_array_equal(res.delta, [0.0, 0.0])
    assert res.residual == 0.0


def _grid_argmin(tolls, pops, net, lo, hi, n=400):
    g0, g1 = np.linspace(lo[0], hi[0], n), np.linspace(lo[1], hi[1], n)
    grid = np.stack(np.meshgrid(g0, g1, indexing="ij"), -1).reshape(-1, 2)
    spacing = np.array([g0[1] - g0[0], g1[1] - g1[0]])
    # Each coordinate's defect is measured in units of its own grid spacing.
    defect = np.max(np.abs(phi_batch(grid, tolls, pops, net) - grid) / spacing, axis=1)
    k = int(np.argmin(defect))
    return grid[k], spacing


def test_desk_instance_matches_grid_search():
    net = desk_network()
    pops = desk_populations()
    res = solve_fixed_point(DESK_TOLLS, pops, net)
    lo, hi = delta_bounds(pops, net)
    coarse, spacing = _grid_argmin(DESK_TOLLS, pops, net, lo, hi)
    assert np.all(np.abs(res.delta - coarse) <= spacing)
    fine_lo = np.maximum(coarse - 2 * spacing, lo)
    fine_hi = np.minimum(coarse + 2 * spacing, hi)
    fine, fine_spacing = _grid_argmin(DESK_TOLLS, pops, net, fine_lo, fine_hi)
    assert np.all(np.abs(res.delta - fine) <= fine_spacing)


def test_solution_invariants_and_determinism():
    net = desk_network()
    pops = desk_populations()
    a = solve_fixed_point(DESK_TOLLS, pops, net)
    b = solve_fixed_point(DESK_TOLLS, pops, net)
    assert a.residual < 1e-9
    lo, hi = delta_bounds(pops, net)
    assert np.all(a.delta >= lo) and np.all(a.delta <= hi)
    assert a.trace == b.trace
    np.testing.assert_array_equal(a.delta, b.delta)
    assert np.all(a.flows.x_o + a.flows.x_h <= segment_demand(pops, net) + 1e-9)
    again = phi(a.delta, DESK_TOLLS, pops, net)
    assert np.max(np.abs(again - a.delta)) < 1e-9
    d = json.loads(json.dumps(a.to_dict()))
    for row in d["population_shares"]:
        assert sum(row["level"]) == pytest.approx(1.0, abs=1e-9)


def test_single_occupancy_flow_accounting():
    prefs = PreferenceDistribution((PreferenceCube((0.0, 1.0), (), 1.0),), 1)
    net = Network(desk_network().segments, 1, 0.25)
    pops = [Population(1, 2, 2000.0, prefs), Population(2, 2, 800.0, prefs)]
    res = solve_fixed_point(TollSchedule((0.5, 0.8), (1.0,)), pops, net)
    np.testing.assert_allclose(res.flows.x_o + res.flows.x_h, [2000.0, 2800.0], rtol=1e-12)


def test_free_segment_equalizes_latency():
    net = desk_network()
    pops = desk_populations()
    res = solve_fixed_point(TollSchedule((0.0, 1.5), (1.0, 0.5)), pops, net)
    assert res.delta[0] == 0.0
    assert res.latencies_o[0] == pytest.approx(res.latencies_h[0], rel=1e-9)


def test_iteration_limit_without_fallback():
    with pytest.raises(NonConvergenceError) as info:
        solve_fixed_point(DESK_TOLLS, desk_populations(), desk_network(), tol=1e-300,
                          max_iter=3, fallback=False)
    assert info.value.trace and info.value.residual > 0


def test_solver_argument_validation():
    with pytest.raises(DomainError):
        solve_fixed_point(DESK_TOLLS, desk_populations(), desk_network(), damping_init=0.0)
    with pytest.raises(DomainError):
        solve_fixed_point(TollSchedule((1.0,), (1.0, 0.5)), desk_populations(), desk_network())


def test_network_and_population_validation():
    with pytest.raises(DomainError):
        Population(2, 1, 10.0, unit_square())
    with pytest.raises(DomainError):
        Network((), 2, 0.5)
    with pytest.raises(DomainError):
        TollSchedule((1.0,), (1.0, 1.5))
    net = desk_network()
    assert Network.from_dict(net.to_dict()) == net


# Uniqueness --------------------------------------------------------------------------

def test_counterexample_map_flags_unit_eigenvalue():
    def counter(d):
        return np.array([2 - d[0] - 2 * d[1], 2 - 2 * d[0] - d[1]])

    flagged, spectrum = uniqueness_check(np.array([0.5, 0.5]), phi_fn=counter)
    assert flagged
    np.testing.assert_allclose(spectrum, [-3.0, 1.0], atol=1e-8)


def test_zero_demand_jacobian_vanishes():
    net = desk_network()
    pops = desk_populations(scale=0.0)
    flagged, spectrum = uniqueness_check(np.zeros(2), DESK_TOLLS, pops, net)
    assert not flagged
    np.testing.assert_allclose(spectrum, [0.0, 0.0], atol=1e-12)


def test_desk_instance_unique_and_multistart_consistent():
    net = desk_network()
    pops = desk_populations()
    ref = solve_fixed_point(DESK_TOLLS, pops, net)
    flagged, _ = uniqueness_check(ref.delta, DESK_TOLLS, pops, net)
    assert not flagged
    lo, hi = delta_bounds(pops, net)
    rng = np.random.default_rng(9)
    for _ in range(4):
        start = rng.uniform(lo, hi)
        res = solve_fixed_point(DESK_TOLLS, pops, net, delta_init=start)
        np.testing.assert_allclose(res.delta, ref.delta, atol=1e-7)


def test_load_corridor_fixture():
    net, pops, tolls = load_corridor(FIXTURES / "corridor.json")
    assert net.E == 2 and len(pops) == 2
    res = solve_fixed_point(tolls, pops, net)
    assert res.residual < 1e-9
