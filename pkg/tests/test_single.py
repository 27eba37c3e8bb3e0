from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import basic_config, random_config, unit_square
from hotlane.exceptions import DomainError, NonConvergenceError, RegimeInconsistencyError
from hotlane.latency import LatencyParams, bpr_latency
from hotlane.preferences import PreferenceDistribution, partition_masses, region_mass
from hotlane.single import (
    EquilibriumResult,
    GameConfig,
    Regime,
    StrategyDistribution,
    action_moments,
    best_response_regions,
    classify_regime,
    comparative_sweep,
    solve_equilibrium,
    strategy_masses,
    threshold_distribution,
)


def _scaled_config(target_ell_dagger, tau, beta_bar, gamma_bar, rho=0.5, A=2):
    """Linear-latency config whose threshold latency difference equals the target."""
    prefs = PreferenceDistribution.uniform((0.0, beta_bar), ((0.0, gamma_bar),))
    probe = GameConfig(1.0, tau, rho, A, LatencyParams.linear(1.0, 1.0), prefs)
    _, ell = threshold_distribution(probe)
    # ell_dagger is linear in the slope for linear latency.
    return GameConfig(1.0, tau, rho, A, LatencyParams.linear(target_ell_dagger / ell, 1.0), prefs)


# Best-response regions ---------------------------------------------------------

def test_regions_zero_toll():
    toll, pool, o = partition_masses(unit_square(), best_response_regions(0.7, 0.0, (1.0, 1.0)))
    assert toll == pytest.approx(1.0)
    assert pool == pytest.approx(0.0, abs=1e-15)
    assert o == pytest.approx(0.0, abs=1e-15)


def test_regions_planar_example():
    masses = partition_masses(unit_square(), best_response_regions(1.0, 0.5, (1.0, 1.0)))
    np.testing.assert_allclose(masses, [0.25, 0.375, 0.375], atol=1e-14)


def test_regions_toll_empty_when_price_high():
    toll, _, _ = best_response_regions(0.8, 1.0, (1.0, 1.0))
    assert region_mass(unit_square(), toll) == 0.0


def test_regions_negative_input():
    with pytest.raises(DomainError):
        best_response_regions(-1.0, 0.5, (1.0, 1.0))


@given(d=st.floats(1e-3, 4.0), tau=st.floats(0.0, 3.0))
def test_closed_form_masses_match_polygon_clipping(d, tau):
    prefs = PreferenceDistribution.grid([0.0, 0.4, 1.2], [0.0, 0.6, 2.0],
                                        np.array([[0.1, 0.3], [0.25, 0.35]]))
    fast = strategy_masses(d, tau, prefs).as_tuple()
    slow = partition_masses(prefs, best_response_regions(d, tau, (1.2, 2.0)))
    np.testing.assert_allclose(fast, slow, atol=1e-12)


# Threshold and regimes -----------------------------------------------------------

def test_threshold_zero_toll():
    cfg = basic_config(tau=0.0, a=2.0)
    sigma, ell = threshold_distribution(cfg)
    assert sigma.as_tuple() == (0.0, 0.0, 1.0)
    p = cfg.latency
    assert ell == pytest.approx(bpr_latency(1.0, 0.5, p) - p.free_flow_time_min)


@pytest.mark.parametrize("tau,expected", [(1.0, 0.5), (3.0, 0.5), (0.5, 0.25)])
def test_threshold_pool_share(tau, expected):
    sigma, _ = threshold_distribution(basic_config(tau=tau))
    assert sigma.sigma_toll == 0.0
    assert sigma.sigma_pool == pytest.approx(expected, abs=1e-14)


@pytest.mark.parametrize(
    "ell,tau,beta_bar,gamma_bar,regime",
    [(2.0, 0.5, 1.0, 1.0, Regime.B), (0.8, 0.9, 1.0, 1.0, Regime.A1),
     (2.0, 0.6, 1.0, 0.5, Regime.A2)],
)
def test_classify_regime_examples(ell, tau, beta_bar, gamma_bar, regime):
    cfg = _scaled_config(ell, tau, beta_bar, gamma_bar)
    assert threshold_distribution(cfg)[1] == pytest.approx(ell, rel=1e-12)
    assert classify_regime(cfg) is regime


def test_zero_toll_classified_b():
    assert classify_regime(basic_config(tau=0.0)) is Regime.B


# Solver ----------------------------------------------------------------------------

def test_zero_toll_equalizes_latency():
    cfg = GameConfig(3000.0, 0.0, 0.3, 2, LatencyParams(6.0, 4e-4), unit_square())
    res = solve_equilibrium(cfg)
    assert abs(res.delta_star) < 1e-8
    assert res.x_h / 0.3 == pytest.approx(res.x_o / 0.7, rel=1e-8)
    assert res.sigma.sigma_pool == 0.0


def test_homogeneous_population_pools():
    beta0, gamma0 = 0.6, 0.3
    prefs = PreferenceDistribution.point_mass(beta0, [gamma0])
    cfg = GameConfig(1.0, 0.8, 0.4, 2, LatencyParams.linear(3.0, 1.0), prefs)
    res = solve_equilibrium(cfg)
    assert res.sigma.sigma_toll == pytest.approx(0.0, abs=1e-9)
    assert 0.0 < res.sigma.sigma_pool < 1.0
    l_h, l_o = res.latencies
    assert beta0 * (l_o - l_h) == pytest.approx(gamma0, rel=1e-4)


def _oracle_shares(delta, tau, beta_bar, gamma_bar):
    """Vectorized strategy shares on a single uniform box."""
    delta = np.asarray(delta, float)
    m = min(tau, gamma_bar)
    with np.errstate(divide="ignore", invalid="ignore"):
        b_star = np.where(delta > 0, m / delta, np.inf)
    pool_area = np.where(b_star >= beta_bar, delta * beta_bar ** 2 / 2,
                         m * b_star / 2 + m * (beta_bar - np.minimum(b_star, beta_bar)))
    with np.errstate(divide="ignore", invalid="ignore"):
        toll_w = np.where(delta > 0, np.maximum(beta_bar - tau / delta, 0.0), 0.0)
    toll_area = toll_w * max(gamma_bar - tau, 0.0)
    area = beta_bar * gamma_bar
    return toll_area / area, pool_area / area


def _brute_force(cfg, n=100_000):
    """Dense grid search for the delta with the smallest fixed-point defect.

    A second grid of ``n`` points refines the cell around the coarse minimizer.
    """
    beta_bar = cfg.preferences.beta_max
    gamma_bar = cfg.preferences.gamma_max(2)
    p = cfg.latency
    D = cfg.demand_D

    def defect(grid):
        toll, pool = _oracle_shares(grid, cfg.toll_tau, beta_bar, gamma_bar)
        o = 1.0 - toll - pool
        x_h = (toll + pool / cfg.occupancy_A) * D
        l_h = p.free_flow_time_min * (1 + (p.congestion_coeff * x_h / cfg.rho) ** p.exponent_b)
        l_o = p.free_flow_time_min * (1 + (p.congestion_coeff * o * D / (1 - cfg.rho))
                                      ** p.exponent_b)
        return np.abs(l_o - l_h - grid), (toll, pool, o)

    delta_bar = bpr_latency(D, 1 - cfg.rho, p) - p.free_flow_time_min
    grid = np.linspace(0.0, delta_bar, n)
    k = int(np.argmin(defect(grid)[0]))
    fine = np.linspace(grid[max(k - 1, 0)], grid[min(k + 1, n - 1)], n)
    err, shares = defect(fine)
    j = int(np.argmin(err))
    return tuple(float(s[j]) for s in shares)


@pytest.mark.parametrize("seed", range(8))
def test_matches_brute_force_grid_search(seed):
    rng = np.random.default_rng(seed)
    prefs = PreferenceDistribution.uniform((0.0, rng.uniform(0.3, 1.5)),
                                           ((0.0, rng.uniform(0.5, 3.0)),))
    cfg = GameConfig(float(rng.uniform(1000, 4000)), float(rng.uniform(0.1, 2.0)),
                     float(rng.uniform(0.2, 0.8)), int(rng.integers(2, 4)),
                     LatencyParams(rng.uniform(3, 10), rng.uniform(2e-4, 6e-4)), prefs)
    res = solve_equilibrium(cfg)
    np.testing.assert_allclose(res.sigma.as_tuple(), _brute_force(cfg), atol=1e-4)


@given(seed=st.integers(0, 10_000))
def test_equilibrium_invariants(seed):
    cfg = random_config(np.random.default_rng(seed))
    res = solve_equilibrium(cfg)
    s = res.sigma
    assert res.solver_residual < 1e-9
    # Positive latency gap and both free actions used.
    assert res.delta_star > 0 and s.sigma_pool > 0 and s.sigma_o > 0
    # Flows and latencies consistent with the shares.
    D, A = cfg.demand_D, cfg.occupancy_A
    assert res.x_h == pytest.approx((s.sigma_toll + s.sigma_pool / A) * D, rel=1e-14)
    assert res.x_o == pytest.approx(s.sigma_o * D, rel=1e-14)
    assert res.delta_star == pytest.approx(res.latencies[1] - res.latencies[0], abs=1e-8)
    # Fixed point: best responses at delta* reproduce sigma*.
    again = strategy_masses(res.delta_star, cfg.toll_tau, cfg.preferences)
    if res.regime is Regime.B:
        np.testing.assert_allclose(again.as_tuple(), s.as_tuple(), atol=1e-7)
    else:
        assert s.sigma_toll == 0.0
        assert again.sigma_pool == pytest.approx(s.sigma_pool, abs=1e-7)


@pytest.mark.parametrize("seed", range(100))
def test_uniqueness_from_random_brackets(seed):
    rng = np.random.default_rng(1000 + seed)
    cfg = random_config(rng)
    ref = solve_equilibrium(cfg)
    if ref.regime is Regime.B:
        root = ref.delta_star
        p = cfg.latency
        full_lo = cfg.toll_tau / cfg.preferences.beta_max
        full_hi = bpr_latency(cfg.demand_D, 1 - cfg.rho, p) - p.free_flow_time_min
    else:
        root = ref.sigma.sigma_pool
        sd, _ = threshold_distribution(cfg)
        full_lo, full_hi = ((0.0, sd.sigma_pool) if ref.regime is Regime.A1
                            else (sd.sigma_pool, 1.0))
    for _ in range(20):
        lo = rng.uniform(full_lo, root)
        hi = rng.uniform(root, full_hi)
        res = solve_equilibrium(cfg, bracket=(lo, hi))
        np.testing.assert_allclose(res.sigma.as_tuple(), ref.sigma.as_tuple(), atol=1e-6)


def test_bad_bracket_raises():
    cfg = basic_config(tau=0.2, a=3.0)
    res = solve_equilibrium(cfg)
    with pytest.raises(RegimeInconsistencyError):
        solve_equilibrium(cfg, bracket=(res.delta_star * 1.5, res.delta_star * 2))


def test_iteration_cap_raises_with_residual():
    cfg = basic_config(tau=0.2, a=3.0)
    with pytest.raises(NonConvergenceError) as info:
        solve_equilibrium(cfg, tol=1e-14, max_iter=3)
    assert info.value.residual > 0


def test_invalid_tol():
    with pytest.raises(DomainError):
        solve_equilibrium(basic_config(), tol=0.0)


def test_config_validation():
    with pytest.raises(DomainError):
        basic_config(A=1)
    with pytest.raises(DomainError):
        basic_config(D=0.0)
    with pytest.raises(DomainError):
        StrategyDistribution(0.5, 0.6, 0.0)


# Comparative statics -----------------------------------------------------------------

def _sweep_config(seed):
    rng = np.random.default_rng(seed)
    cfg = random_config(rng)
    return cfg.replace(toll_tau=0.3 * min(cfg.preferences.gamma_max(2), 1.0))


@pytest.mark.parametrize("seed", range(10))
def test_increase_rho(seed):
    cfg = _sweep_config(seed)
    results = comparative_sweep(cfg, "rho", [0.2, 0.3, 0.4, 0.5, 0.6])
    o = [r.sigma.sigma_o for r in results]
    toll = [r.sigma.sigma_toll for r in results]
    pool = [r.sigma.sigma_pool for r in results]
    delta = [r.delta_star for r in results]
    assert all(b < a for a, b in zip(o, o[1:]))
    assert all(b >= a - 1e-9 for a, b in zip(toll, toll[1:]))
    assert all(b >= a - 1e-9 for a, b in zip(pool, pool[1:]))
    assert all(b >= a - 1e-9 for a, b in zip(delta, delta[1:]))


@pytest.mark.parametrize("seed", range(10))
def test_increase_tau(seed):
    cfg = _sweep_config(seed)
    gbar = cfg.preferences.gamma_max(2)
    results = comparative_sweep(cfg, "tau", list(np.linspace(0.05, 1.2 * gbar, 8)))
    toll = [r.sigma.sigma_toll for r in results]
    pool = [r.sigma.sigma_pool for r in results]
    delta = [r.delta_star for r in results]
    assert all(b <= a + 1e-7 for a, b in zip(toll, toll[1:]))
    assert all(b >= a - 1e-7 for a, b in zip(pool, pool[1:]))
    assert all(b >= a - 1e-7 for a, b in zip(delta, delta[1:]))


def test_tau_beyond_regime_a_is_inert():
    cfg = basic_config(tau=0.5, a=0.5)
    base = solve_equilibrium(cfg.replace(toll_tau=5.0))
    assert base.regime in (Regime.A1, Regime.A2)
    for tau in (6.0, 10.0, 50.0):
        res = solve_equilibrium(cfg.replace(toll_tau=tau))
        np.testing.assert_allclose(res.sigma.as_tuple(), base.sigma.as_tuple(), atol=1e-9)
        assert res.delta_star == pytest.approx(base.delta_star, abs=1e-8)


def test_sweep_validation_and_error_context():
    cfg = basic_config()
    with pytest.raises(DomainError):
        comparative_sweep(cfg, "rho", [0.5, 0.4])
    with pytest.raises(DomainError):
        comparative_sweep(cfg, "demand", [0.5])


def test_continuity_across_regime_boundary():
    from scipy.optimize import brentq

    cfg = basic_config(tau=0.5, a=1.0)

    def gap(tau):
        _, ell = threshold_distribution(cfg.replace(toll_tau=tau))
        return tau - min(1.0, ell)

    boundary = brentq(gap, 1e-6, 1.0, xtol=1e-15)
    below = solve_equilibrium(cfg.replace(toll_tau=boundary * (1 - 1e-7)))
    at = solve_equilibrium(cfg.replace(toll_tau=boundary * (1 + 1e-12)))
    assert below.regime is Regime.B and at.regime is not Regime.B
    np.testing.assert_allclose(below.sigma.as_tuple(), at.sigma.as_tuple(), atol=1e-5)


def test_emission_dual():
    """On this instance some vehicle-time minimizer also maximizes the HOV share."""
    prefs = PreferenceDistribution.uniform((0.0, 1.0), ((0.0, 1.0),))
    cfg = GameConfig(2000.0, 0.0, 0.25, 2, LatencyParams(5.0, 5e-4, 4.0), prefs)
    taus = np.linspace(0.0, 1.4, 141)
    vt, hov = [], []
    for tau in taus:
        r = solve_equilibrium(cfg.replace(toll_tau=float(tau)))
        vt.append(r.latencies[0] * r.x_h + r.latencies[1] * r.x_o)
        hov.append(r.sigma.sigma_toll + r.sigma.sigma_pool)
    vt, hov = np.array(vt), np.array(hov)
    argmin = set(np.flatnonzero(vt <= vt.min() * (1 + 1e-9)))
    argmax = set(np.flatnonzero(hov >= hov.max() * (1 - 1e-9)))
    assert argmin & argmax


def test_action_moments_consistent():
    res = solve_equilibrium(basic_config(tau=0.4, a=2.0))
    mom = action_moments(res)
    masses = [mom[k][0] for k in ("toll", "pool", "o")]
    assert sum(masses) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(masses, res.sigma.as_tuple(), atol=1e-8)
    total_beta = sum(mom[k][1] for k in mom)
    assert total_beta == pytest.approx(0.5, abs=1e-12)


def test_result_serialization():
    cfg = basic_config(tau=0.5)
    res = solve_equilibrium(cfg)
    d = json.loads(json.dumps(res.to_dict()))
    assert d["regime"] == res.regime.value
    assert d["sigma"]["pool"] == res.sigma.sigma_pool
    assert set(d) >= {"delta_star", "flows", "latencies", "solver_residual"}
    assert GameConfig.from_dict(cfg.to_dict()) == cfg
    assert isinstance(res, EquilibriumResult)
    assert math.isfinite(d["delta_star"])
