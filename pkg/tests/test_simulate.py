"""Closed-loop behavior: equilibria, events, integrator quality, daily runs."""

from __future__ import annotations

import numpy as np
import pytest

from voltctrl.controller import (
    ControllerState,
    Gains,
    Limits,
    equilibrium_residual,
    objective,
)
from voltctrl.errors import ConfigError, PlantDivergenceError
from voltctrl.netcase import build_admittance, scale_loads, trip_branch
from voltctrl.oracle import solve_centralized
from voltctrl.powerflow import nominal_injections, solve_power_flow
from voltctrl.sensitivity import partition_buses, rebased, voltage_sensitivity
from voltctrl.simulate import (
    PlantMode,
    Scenario,
    SetLoadScale,
    Trajectory,
    TripBranch,
    default_daily_profile,
    integrate,
    run_daily,
    run_fault,
    run_static,
)

TOY_LIMITS_KW = dict(q_lo=-0.5, q_hi=0.5)


def _oracle_for(case):
    """Centralized solution at the uncontrolled operating point."""
    sol = solve_power_flow(case, nominal_injections(case), max_iter=30)
    assert sol.converged
    part = partition_buses(case)
    sens = rebased(
        voltage_sensitivity(build_admittance(case), part),
        base_v=sol.v[part.pq],
        base_q=np.zeros(part.n_load),
    )
    lim = Limits.box(part.n_load, part.n_controlled)
    return solve_centralized(sens, lim), sens, lim, sol


@pytest.fixture(scope="module")
def toy_limits():
    return Limits.box(1, 1, **TOY_LIMITS_KW)


@pytest.fixture(scope="module")
def toy_lin(toy2, toy_limits):
    return run_static(toy2, limits=toy_limits, plant_mode=PlantMode.LINEAR, tol=1e-7)


@pytest.fixture(scope="module")
def toy_nl(toy2, toy_limits):
    return run_static(toy2, limits=toy_limits, plant_mode=PlantMode.NONLINEAR, tol=1e-7)


@pytest.fixture(scope="module")
def heavy14(case14):
    return scale_loads(case14, 3.1)


@pytest.fixture(scope="module")
def heavy_lin(heavy14):
    return run_static(heavy14, plant_mode=PlantMode.LINEAR, tol=1e-7)


@pytest.fixture(scope="module")
def heavy_nl(heavy14):
    return run_static(heavy14, plant_mode=PlantMode.NONLINEAR)


@pytest.fixture(scope="module")
def heavy_oracle(heavy14):
    return _oracle_for(heavy14)


@pytest.fixture(scope="module")
def light30(case30):
    return scale_loads(case30, 0.25)


@pytest.fixture(scope="module")
def light30_lin(light30):
    return run_static(light30, plant_mode=PlantMode.LINEAR, tol=1e-7)


@pytest.fixture(scope="module")
def fault_nl(heavy14):
    return run_fault(heavy14, trip=(4, 5), plant_mode=PlantMode.NONLINEAR)


@pytest.fixture(scope="module")
def daily14(case14):
    return run_daily(scale_loads(case14, 2.5), plant_mode=PlantMode.NONLINEAR)


@pytest.fixture(scope="module")
def daily30(case30):
    profile = np.array([0.25] * 8 + [2.0] * 16)
    return run_daily(case30, profile=profile, plant_mode=PlantMode.NONLINEAR)


def test_toy_linear_matches_hand_kkt(toy_lin):
    assert toy_lin.converged
    assert toy_lin.final_q[0] == pytest.approx(0.3, abs=1e-4)
    assert toy_lin.trajectory.states[-1].lam_lo[0] == pytest.approx(6.0, abs=1e-4)
    assert toy_lin.final_residual < 1e-7


def test_toy_nonlinear_drives_true_voltage_to_floor(toy_nl):
    # exact plant equilibrium: 10 v (v - 1) = q - 0.736 at v = 0.95
    assert toy_nl.converged
    assert toy_nl.final_v[1] == pytest.approx(0.95, abs=1e-5)
    assert toy_nl.final_q[0] == pytest.approx(0.736 - 0.475, abs=1e-3)
    lam = toy_nl.trajectory.states[-1].lam_lo[0]
    assert lam == pytest.approx(2 * toy_nl.final_q[0] / 0.1, abs=1e-2)


def test_toy_residual_decays_monotonically_after_transient(toy2, toy_limits, toy_lin):
    sol = solve_power_flow(toy2, nominal_injections(toy2))
    part = partition_buses(toy2)
    sens = rebased(
        voltage_sensitivity(build_admittance(toy2), part),
        base_v=sol.v[part.pq],
        base_q=np.zeros(1),
    )
    resid = np.array(
        [
            equilibrium_residual(s, v, sens, toy_limits)
            for s, v in zip(toy_lin.trajectory.states, toy_lin.trajectory.v)
        ]
    )
    tail = resid[len(resid) // 4 :]
    assert np.all(np.diff(tail) <= 1e-12)


def test_feasible_start_stays_at_zero(case14):
    case = scale_loads(case14, 1.6)
    sol = solve_power_flow(case, nominal_injections(case))
    part = partition_buses(case)
    v = sol.v[part.pq]
    assert np.all(v > 0.95) and np.all(v < 1.05)
    res = run_static(case, plant_mode=PlantMode.NONLINEAR)
    assert res.converged
    assert len(res.trajectory) == 1
    assert np.max(np.abs(res.final_q)) == 0.0
    assert res.trajectory.cost[-1] == 0.0


def test_stock_case_needs_only_small_correction(case14):
    res = run_static(case14, plant_mode=PlantMode.NONLINEAR)
    assert res.converged
    assert np.max(np.abs(res.final_q)) < 0.1
    assert res.trajectory.cost[-1] < 0.02
    v = res.trajectory.v[-1]
    assert np.all(v > 0.95 - 1e-5) and np.all(v < 1.05 + 1e-5)


def test_heavy_linear_matches_oracle(heavy_lin, heavy_oracle):
    qp, sens, lim, _ = heavy_oracle
    assert heavy_lin.converged
    assert np.max(np.abs(heavy_lin.final_q - qp.q_star)) < 1e-4
    st = heavy_lin.trajectory.states[-1]
    assert np.max(np.abs(st.lam_lo - qp.lam_lo)) < 1e-3
    assert np.max(np.abs(st.lam_hi - qp.lam_hi)) < 1e-3
    assert np.max(np.abs(st.mu_hi - qp.mu_hi)) < 1e-3
    assert np.max(np.abs(st.mu_lo - qp.mu_lo)) < 1e-3
    v = heavy_lin.trajectory.v[-1]
    slack = np.concatenate(
        [lim.v_hi - v, v - lim.v_lo, lim.q_hi - st.q, st.q - lim.q_lo]
    )
    mults = np.concatenate([st.lam_hi, st.lam_lo, st.mu_hi, st.mu_lo])
    assert np.max(np.abs(mults * slack)) < 1e-4


def test_heavy_nonlinear_voltages_within_band(heavy14, heavy_nl, case14):
    assert heavy_nl.converged
    part = partition_buses(heavy14)
    v = heavy_nl.final_v[part.pq]
    assert np.all(v >= 0.95 - 5e-3) and np.all(v <= 1.05 + 5e-3)
    assert np.max(np.abs(heavy_nl.final_q)) <= 0.2 + 1e-6
    ids = [case14.buses[i].id for i in part.pq]
    v4, v14 = v[ids.index(4)], v[ids.index(14)]
    assert v4 == pytest.approx(0.95, abs=1e-3)
    assert v14 == pytest.approx(0.95, abs=1e-3)


def test_plant_modes_agree_within_linearization_bound(heavy_lin, heavy_nl, toy_lin, toy_nl):
    gap14 = np.max(np.abs(heavy_lin.final_q - heavy_nl.final_q))
    gap_toy = np.max(np.abs(toy_lin.final_q - toy_nl.final_q))
    assert gap14 < 0.1, f"linear/nonlinear gap {gap14:.4f} exceeds 0.1"
    assert gap_toy < 0.1, f"linear/nonlinear gap {gap_toy:.4f} exceeds 0.1"


def test_light30_consumes_reactive_and_restores_band(light30, light30_lin):
    qp, sens, lim, bare = _oracle_for(light30)
    part = partition_buses(light30)
    assert np.max(bare.v[part.pq]) > 1.05
    assert light30_lin.converged
    assert np.max(np.abs(light30_lin.final_q - qp.q_star)) < 1e-4
    assert np.all(light30_lin.final_q < 1e-9)
    assert np.min(light30_lin.final_q) < -0.01
    v = light30_lin.trajectory.v[-1]
    assert np.all(v <= 1.05 + 5e-3)


def test_fault_raises_cost_and_bus4_injection(fault_nl):
    assert fault_nl.converged
    assert fault_nl.post_cost > fault_nl.pre_cost
    assert fault_nl.cost_ratio == pytest.approx(fault_nl.post_cost / fault_nl.pre_cost)
    # controlled position 0 is bus 4 on the 14-bus case
    assert fault_nl.final_q[0] > fault_nl.pre_q[0]
    assert fault_nl.pre_cost == pytest.approx(objective(fault_nl.pre_q))


def test_fault_voltages_reenter_band(fault_nl, heavy14):
    part = partition_buses(heavy14)
    v = fault_nl.final_v[part.pq]
    assert np.all(v >= 0.95 - 5e-3) and np.all(v <= 1.05 + 5e-3)


def test_fault_with_explicit_trip_time(heavy14):
    res = run_fault(
        heavy14, trip=(4, 5), t_trip=50.0, plant_mode=PlantMode.LINEAR, tol=1e-6
    )
    t = res.trajectory.t
    assert t[0] == 0.0 and t[-1] > 50.0
    pre_idx = int(np.max(np.nonzero(t <= 50.0)[0]))
    assert res.pre_cost == pytest.approx(res.trajectory.cost[pre_idx])
    assert res.converged
    assert res.post_cost > res.pre_cost


def test_far_trip_barely_moves_optimal_cost(light30):
    qp_base, _, _, _ = _oracle_for(light30)
    qp_trip, _, _, _ = _oracle_for(trip_branch(light30, 29, 30))
    rel = abs(qp_trip.objective_value - qp_base.objective_value) / qp_base.objective_value
    assert rel < 0.05


def test_load_scale_event_reaches_new_optimum(case14, heavy_oracle):
    qp, _, _, _ = heavy_oracle
    base = scale_loads(case14, 1.6)
    scenario = Scenario(
        case=base,
        plant_mode=PlantMode.LINEAR,
        events=((10.0, SetLoadScale(3.1 / 1.6)),),
        horizon=2e5,
        equilibrium_tol=1e-6,
    )
    res = integrate(scenario)
    assert res.converged
    assert np.max(np.abs(res.final_q - qp.q_star)) < 1e-4


def test_event_runs_are_bit_identical(heavy14):
    scenario = Scenario(
        case=heavy14,
        plant_mode=PlantMode.NONLINEAR,
        events=((50.0, TripBranch(4, 5)),),
        horizon=300.0,
        equilibrium_tol=1e-6,
    )
    a = integrate(scenario)
    b = integrate(scenario)
    assert a.trajectory.t.tobytes() == b.trajectory.t.tobytes()
    assert a.trajectory.v.tobytes() == b.trajectory.v.tobytes()
    assert a.trajectory.cost.tobytes() == b.trajectory.cost.tobytes()
    for sa, sb in zip(a.trajectory.states, b.trajectory.states):
        assert np.array_equal(sa.packed(), sb.packed())


def test_gain_scaling_preserves_equilibrium(toy2, toy_limits):
    slow = run_static(
        toy2, limits=toy_limits, plant_mode=PlantMode.LINEAR, tol=1e-7
    )
    fast = run_static(
        toy2,
        limits=toy_limits,
        gains=Gains(k_q=10.0, k_lam=10.0, k_mu=10.0),
        plant_mode=PlantMode.LINEAR,
        tol=1e-7,
    )
    assert abs(slow.final_q[0] - fast.final_q[0]) < 1e-6
    lam_a = slow.trajectory.states[-1].lam_lo[0]
    lam_b = fast.trajectory.states[-1].lam_lo[0]
    assert abs(lam_a - lam_b) < 1e-5


def test_fixed_step_is_second_order(toy2, toy_limits):
    # q decays freely from 0.3 with rate -2q; no constraint ever activates
    relaxed = scale_loads(toy2, 0.0)
    start = ControllerState(
        q=np.array([0.3]),
        lam_hi=np.zeros(1),
        lam_lo=np.zeros(1),
        mu_hi=np.zeros(1),
        mu_lo=np.zeros(1),
    )
    exact = 0.3 * np.exp(-2.0)
    errors = []
    for h in (0.05, 0.025, 0.0125):
        scenario = Scenario(
            case=relaxed,
            plant_mode=PlantMode.LINEAR,
            limits=toy_limits,
            horizon=1.0,
            equilibrium_tol=None,
            initial_state=start,
        )
        res = integrate(scenario, fixed_step=h)
        errors.append(abs(res.final_q[0] - exact))
    ratios = [errors[i] / errors[i + 1] for i in range(len(errors) - 1)]
    for r in ratios:
        assert 3.2 < r < 4.8, f"error ratios {ratios} not consistent with order 2"


def test_halving_tolerance_reduces_error(toy2, toy_limits):
    relaxed = scale_loads(toy2, 0.0)
    start = ControllerState(
        q=np.array([0.3]),
        lam_hi=np.zeros(1),
        lam_lo=np.zeros(1),
        mu_hi=np.zeros(1),
        mu_lo=np.zeros(1),
    )
    exact = 0.3 * np.exp(-2.0)
    errors = []
    for rtol in (1e-4, 5e-5, 2.5e-5, 1.25e-5):
        scenario = Scenario(
            case=relaxed,
            plant_mode=PlantMode.LINEAR,
            limits=toy_limits,
            horizon=1.0,
            equilibrium_tol=None,
            rtol=rtol,
            atol=rtol * 1e-2,
            initial_state=start,
        )
        errors.append(abs(integrate(scenario).final_q[0] - exact))
    for coarse, fine in zip(errors, errors[1:]):
        assert fine < coarse * 1.05


def test_daily_flat_profile_matches_static(case14):
    base = scale_loads(case14, 2.5)
    static = run_static(base, plant_mode=PlantMode.NONLINEAR)
    assert static.converged
    flat = run_daily(base, profile=np.ones(24), plant_mode=PlantMode.NONLINEAR)
    assert flat.converged
    for hour in range(24):
        assert np.max(np.abs(flat.hourly_final_q[hour] - static.final_q)) < 1e-6
    spread = np.max(flat.hourly_final_q, axis=0) - np.min(flat.hourly_final_q, axis=0)
    assert np.max(spread) < 1e-6


def test_daily_peaked_profile_restores_band(daily14):
    unc = daily14.uncontrolled_v
    out_hours = (unc < 0.95 - 1e-9).any(axis=1) | (unc > 1.05 + 1e-9).any(axis=1)
    assert out_hours.any()
    ctl = daily14.hourly_final_v
    assert np.all(ctl >= 0.95 - 1e-3) and np.all(ctl <= 1.05 + 1e-3)
    assert daily14.converged


def test_daily_low_then_high_flips_injection_sign(daily30):
    sums = daily30.hourly_final_q.sum(axis=1)
    assert np.all(sums[:8] < 0)
    assert np.all(sums[8:] > 0)
    unc = daily30.uncontrolled_v
    assert np.max(unc[0]) > 1.05
    assert np.min(unc[-1]) < 0.95


def test_daily_reset_multipliers_flag(case14):
    base = scale_loads(case14, 1.6)
    res = run_daily(
        base,
        profile=np.ones(24),
        plant_mode=PlantMode.NONLINEAR,
        reset_multipliers=True,
    )
    assert res.converged
    assert np.max(np.abs(res.hourly_final_q)) < 1e-9


def test_daily_profile_validation(case14):
    with pytest.raises(ConfigError):
        run_daily(case14, profile=np.ones(23))
    with pytest.raises(ConfigError):
        run_daily(case14, profile=np.full(24, -1.0))


def test_multipliers_stay_nonnegative_everywhere(
    toy_lin, toy_nl, heavy_lin, heavy_nl, light30_lin, fault_nl, daily14, daily30
):
    for res in (toy_lin, toy_nl, heavy_lin, heavy_nl, light30_lin, fault_nl, daily14, daily30):
        assert res.violations.min_multiplier >= -1e-9
        for state in res.trajectory.states:
            assert np.min(state.packed()[len(state.q) :]) >= 0.0


def test_final_cost_equals_objective_exactly(heavy_nl, toy_lin):
    for res in (heavy_nl, toy_lin):
        assert res.trajectory.cost[-1] == objective(res.trajectory.states[-1].q)
        assert res.converged and res.final_residual < 1e-6 + 1e-12


def test_scenario_validation():
    from voltctrl import load_case

    case = load_case("case14")
    with pytest.raises(ConfigError):
        Scenario(case=case, horizon=-1.0)
    with pytest.raises(ConfigError):
        Scenario(case=case, events=((5.0, TripBranch(4, 5)), (5.0, TripBranch(2, 3))), horizon=10.0)
    with pytest.raises(ConfigError):
        Scenario(case=case, events=((20.0, TripBranch(4, 5)),), horizon=10.0)
    with pytest.raises(ConfigError):
        integrate(Scenario(case=case, events=((1.0, "boom"),), horizon=10.0))


def test_trajectory_validation():
    state = ControllerState.zeros(1, 1)
    with pytest.raises(ValueError):
        Trajectory(
            t=np.array([0.0, 0.0]),
            states=(state, state),
            v=np.zeros((2, 1)),
            cost=np.zeros(2),
        )
    with pytest.raises(ValueError):
        Trajectory(
            t=np.array([0.0, 1.0]),
            states=(state,),
            v=np.zeros((2, 1)),
            cost=np.zeros(2),
        )


def test_unsolvable_plant_raises(case14):
    hopeless = scale_loads(case14, 40.0)
    with pytest.raises(PlantDivergenceError):
        run_static(hopeless, plant_mode=PlantMode.NONLINEAR)


def test_default_profile_shape():
    prof = default_daily_profile()
    assert prof.shape == (24,)
    assert prof.min() == pytest.approx(0.7, abs=0.02)
    assert prof.max() == pytest.approx(1.2, abs=0.02)
