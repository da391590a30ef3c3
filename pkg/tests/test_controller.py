from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose

from voltctrl import build_admittance
from voltctrl.controller import (
    ControllerState,
    Gains,
    Limits,
    StateRates,
    dynamics_rhs,
    equilibrium_residual,
    lagrangian,
    objective,
    objective_gradient,
    positive_projection,
    primal_rate_bracket,
    unpack_state,
)
from voltctrl.sensitivity import (
    BusPartition,
    SensitivityMatrix,
    partition_buses,
    predict_voltage,
    rebased,
    voltage_sensitivity,
)


def toy_sens(base_v=0.92):
    part = BusPartition(
        slack=0, pv=np.array([], dtype=int), pq=np.array([1]), controlled=np.array([1])
    )
    return SensitivityMatrix(
        x=np.array([[0.1]]),
        partition=part,
        base_v=np.array([float(base_v)]),
        base_q=np.array([0.0]),
    )


def toy_limits():
    return Limits.box(1, 1, q_lo=-0.5, q_hi=0.5)


def test_objective_basics():
    assert objective(np.zeros(3)) == 0.0
    assert_allclose(objective_gradient(np.zeros(3)), np.zeros(3))
    q = np.array([0.1, -0.2])
    assert objective(q) == pytest.approx(0.05)
    assert_allclose(objective_gradient(q), [0.2, -0.4])


def test_objective_gradient_matches_finite_difference():
    rng = np.random.RandomState(3)
    h = 1e-6
    for _ in range(20):
        q = rng.uniform(-1, 1, 5)
        grad = objective_gradient(q)
        for i in range(5):
            e = np.zeros(5)
            e[i] = h
            fd = (objective(q + e) - objective(q - e)) / (2 * h)
            assert abs(fd - grad[i]) < 1e-8


def test_lagrangian_reduces_to_objective():
    state = ControllerState.zeros(2, 2)
    state = ControllerState(
        q=np.array([0.1, -0.3]),
        lam_hi=state.lam_hi,
        lam_lo=state.lam_lo,
        mu_hi=state.mu_hi,
        mu_lo=state.mu_lo,
    )
    lim = Limits.box(2, 2)
    v = np.array([1.0, 1.0])
    assert lagrangian(state, v, lim) == pytest.approx(objective(state.q))


def test_lagrangian_boundary_term_vanishes():
    lim = Limits.box(1, 1)
    v_at_floor = lim.v_lo.copy()
    for lam in (0.0, 5.0):
        state = ControllerState(
            q=np.zeros(1),
            lam_hi=np.zeros(1),
            lam_lo=np.array([lam]),
            mu_hi=np.zeros(1),
            mu_lo=np.zeros(1),
        )
        assert lagrangian(state, v_at_floor, lim) == pytest.approx(0.0)


def test_lagrangian_single_bus_value():
    lim = Limits.box(1, 1)
    state = ControllerState(
        q=np.zeros(1),
        lam_hi=np.zeros(1),
        lam_lo=np.array([2.0]),
        mu_hi=np.zeros(1),
        mu_lo=np.zeros(1),
    )
    assert lagrangian(state, np.array([0.92]), lim) == pytest.approx(0.06)


def test_positive_projection():
    assert positive_projection(-3.0, 0.0) == 0.0
    assert positive_projection(-3.0, 0.5) == -3.0
    assert positive_projection(3.0, 0.0) == 3.0
    assert positive_projection(0.0, 0.0) == 0.0
    with pytest.raises(ValueError):
        positive_projection(1.0, -1e-3)


def test_interior_zero_state_is_equilibrium():
    sens = toy_sens(base_v=1.0)
    lim = toy_limits()
    state = ControllerState.zeros(1, 1)
    rates = dynamics_rhs(state, np.array([1.0]), sens, lim)
    assert np.all(rates.packed() == 0.0)
    assert equilibrium_residual(state, np.array([1.0]), sens, lim) == 0.0


def test_toy_kkt_point_is_equilibrium():
    # by hand: v = 0.92 + 0.1 q pinned at 0.95 needs q = 0.3; stationarity
    # 2q - 0.1 lam_lo = 0 gives lam_lo = 6
    sens = toy_sens()
    lim = toy_limits()
    state = ControllerState(
        q=np.array([0.3]),
        lam_hi=np.zeros(1),
        lam_lo=np.array([6.0]),
        mu_hi=np.zeros(1),
        mu_lo=np.zeros(1),
    )
    v = predict_voltage(sens, state.q)
    assert v[0] == pytest.approx(0.95)
    assert equilibrium_residual(state, v, sens, lim) < 1e-10


def test_violated_floor_forces_multiplier_growth():
    sens = toy_sens()
    lim = toy_limits()
    state = ControllerState.zeros(1, 1)
    gains = Gains(k_lam=2.5)
    v = np.array([0.92])
    rates = dynamics_rhs(state, v, sens, lim, gains)
    assert rates.lam_lo[0] == pytest.approx(2.5 * 0.03)
    assert equilibrium_residual(state, v, sens, lim, gains) >= 2.5 * 0.03 - 1e-12


def test_rates_scale_with_gains():
    sens = toy_sens()
    lim = toy_limits()
    state = ControllerState(
        q=np.array([0.1]),
        lam_hi=np.array([0.2]),
        lam_lo=np.array([1.0]),
        mu_hi=np.zeros(1),
        mu_lo=np.zeros(1),
    )
    v = np.array([0.9])
    r1 = dynamics_rhs(state, v, sens, lim, Gains()).packed()
    r7 = dynamics_rhs(state, v, sens, lim, Gains(k_q=7, k_lam=7, k_mu=7)).packed()
    assert_allclose(r7, 7 * r1, atol=1e-14)


def test_gradient_bracket_matches_lagrangian_fd(case14):
    # central differences of L(q, v(q)) against the analytic bracket at
    # random strictly interior states
    part = partition_buses(case14)
    sens = voltage_sensitivity(build_admittance(case14), part)
    sens = rebased(sens, base_v=np.full(9, 1.0), base_q=np.zeros(9))
    lim = Limits.box(9, 9)
    rng = np.random.RandomState(11)
    h = 1e-6
    for _ in range(10):
        state = ControllerState(
            q=rng.uniform(-0.15, 0.15, 9),
            lam_hi=rng.uniform(0.1, 2.0, 9),
            lam_lo=rng.uniform(0.1, 2.0, 9),
            mu_hi=rng.uniform(0.1, 2.0, 9),
            mu_lo=rng.uniform(0.1, 2.0, 9),
        )
        bracket = primal_rate_bracket(state, sens)
        for i in range(9):
            e = np.zeros(9)
            e[i] = h
            up = ControllerState(state.q + e, state.lam_hi, state.lam_lo, state.mu_hi, state.mu_lo)
            dn = ControllerState(state.q - e, state.lam_hi, state.lam_lo, state.mu_hi, state.mu_lo)
            fd = (
                lagrangian(up, predict_voltage(sens, up.q), lim)
                - lagrangian(dn, predict_voltage(sens, dn.q), lim)
            ) / (2 * h)
            assert abs(fd - bracket[i]) < 1e-8


def test_residual_invariant_under_relabeling(case14):
    part = partition_buses(case14)
    sens = voltage_sensitivity(build_admittance(case14), part)
    lim = Limits.box(9, 9)
    rng = np.random.RandomState(5)
    state = ControllerState(
        q=rng.uniform(-0.2, 0.2, 9),
        lam_hi=rng.uniform(0, 1, 9),
        lam_lo=rng.uniform(0, 1, 9),
        mu_hi=rng.uniform(0, 1, 9),
        mu_lo=rng.uniform(0, 1, 9),
    )
    v = rng.uniform(0.9, 1.1, 9)
    r0 = equilibrium_residual(state, v, sens, lim)

    perm = rng.permutation(9)
    part_p = BusPartition(
        slack=part.slack, pv=part.pv, pq=part.pq[perm], controlled=part.controlled[perm]
    )
    sens_p = SensitivityMatrix(
        x=sens.x[np.ix_(perm, perm)],
        partition=part_p,
        base_v=sens.base_v[perm],
        base_q=sens.base_q[perm],
    )
    state_p = ControllerState(
        q=state.q[perm],
        lam_hi=state.lam_hi[perm],
        lam_lo=state.lam_lo[perm],
        mu_hi=state.mu_hi[perm],
        mu_lo=state.mu_lo[perm],
    )
    r1 = equilibrium_residual(state_p, v[perm], sens_p, lim)
    assert r1 == pytest.approx(r0, abs=1e-14)


def test_pack_unpack_round_trip():
    rng = np.random.RandomState(2)
    state = ControllerState(
        q=rng.uniform(-1, 1, 3),
        lam_hi=rng.uniform(0, 1, 5),
        lam_lo=rng.uniform(0, 1, 5),
        mu_hi=rng.uniform(0, 1, 3),
        mu_lo=rng.uniform(0, 1, 3),
    )
    vec = state.packed()
    assert len(vec) == 3 * 3 + 2 * 5
    again = unpack_state(vec, 5, 3)
    for name in ("q", "lam_hi", "lam_lo", "mu_hi", "mu_lo"):
        assert_allclose(getattr(again, name), getattr(state, name))
    with pytest.raises(ValueError):
        unpack_state(vec[:-1], 5, 3)


def test_state_validation():
    with pytest.raises(ValueError, match="nonnegative"):
        ControllerState(
            q=np.zeros(1),
            lam_hi=np.array([-0.1]),
            lam_lo=np.zeros(1),
            mu_hi=np.zeros(1),
            mu_lo=np.zeros(1),
        )
    with pytest.raises(ValueError, match="finite"):
        ControllerState(
            q=np.array([np.nan]),
            lam_hi=np.zeros(1),
            lam_lo=np.zeros(1),
            mu_hi=np.zeros(1),
            mu_lo=np.zeros(1),
        )


def test_limits_validation():
    with pytest.raises(ValueError):
        Limits.box(2, 2, v_lo=1.05, v_hi=0.95)
    with pytest.raises(ValueError):
        Limits.box(2, 2, q_lo=0.2, q_hi=-0.2)


def test_gains_validation():
    with pytest.raises(ValueError):
        Gains(k_q=0.0)


def test_rhs_input_validation():
    sens = toy_sens()
    lim = toy_limits()
    state = ControllerState.zeros(1, 1)
    with pytest.raises(ValueError):
        dynamics_rhs(state, np.array([1.0, 1.0]), sens, lim)
    with pytest.raises(ValueError):
        dynamics_rhs(state, np.array([np.nan]), sens, lim)


def test_rates_packed_layout():
    rates = StateRates(
        q=np.array([1.0]),
        lam_hi=np.array([2.0]),
        lam_lo=np.array([3.0]),
        mu_hi=np.array([4.0]),
        mu_lo=np.array([5.0]),
    )
    assert_allclose(rates.packed(), [1, 2, 3, 4, 5])
