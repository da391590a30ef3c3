"""Nonlinear AC power flow solved by Newton-Raphson in polar form.

This is the plant model: given a network and a set of power injections it
returns the voltage magnitudes and angles that balance the polar power flow
equations

    P_k = V_k sum_n V_n (G_kn cos d_kn + B_kn sin d_kn)
    Q_k = V_k sum_n V_n (G_kn sin d_kn - B_kn cos d_kn)

with d_kn = delta_k - delta_n. Angles are solved at every non-slack bus and
magnitudes at every PQ bus; slack and PV magnitudes stay at their setpoints
(no reactive-limit switching).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularModelError
from .netcase import BusKind, NetworkCase, build_admittance


@dataclass(frozen=True, eq=False)
class InjectionSet:
    """Specified busbar injections in per-unit, generation counted positive.

    ``p_injection`` runs over all buses in case order (the slack entry is
    carried but not enforced). ``q_injection`` runs over PQ buses only, in
    case order, and already contains any controller output added to the
    negated load.
    """

    p_injection: np.ndarray
    q_injection: np.ndarray

    def __post_init__(self) -> None:
        if not (np.all(np.isfinite(self.p_injection)) and np.all(np.isfinite(self.q_injection))):
            raise ValueError("injections must be finite")


@dataclass(frozen=True, eq=False)
class PowerFlowSolution:
    """Voltage solution in case bus order. Angles in radians."""

    v: np.ndarray
    delta: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float


def nominal_injections(case: NetworkCase) -> InjectionSet:
    """Injections from the case data alone: generation minus load, no controllers."""
    p_gen = np.zeros(case.n_buses)
    index = case.bus_index()
    for g in case.generators:
        p_gen[index[g.bus]] += g.p_gen
    p_load = np.array([b.p_load for b in case.buses])
    q_load = np.array([b.q_load for b in case.buses])
    pq = case.indices_of(BusKind.PQ)
    return InjectionSet(p_injection=p_gen - p_load, q_injection=-q_load[pq])


def _complex_power(y_bus: np.ndarray, v: np.ndarray, delta: np.ndarray) -> np.ndarray:
    u = v * np.exp(1j * delta)
    return u * np.conj(y_bus @ u)


def solve_power_flow(
    case: NetworkCase,
    inj: InjectionSet,
    tol: float = 1e-8,
    max_iter: int = 20,
    warm_start: PowerFlowSolution | None = None,
) -> PowerFlowSolution:
    """Newton-Raphson solve of the polar power flow equations.

    Starts flat (v = 1, delta = 0 at the unknowns) unless ``warm_start``
    supplies a previous solution. Non-convergence within ``max_iter`` is
    reported through ``converged=False``, not an exception; a singular
    Jacobian raises :class:`SingularModelError`.
    """
    if tol <= 0 or max_iter < 1:
        raise ValueError("tol must be positive and max_iter at least 1")
    adm = build_admittance(case)
    y_bus = adm.g + 1j * adm.b
    n = case.n_buses
    non_slack = np.array([i for i, b in enumerate(case.buses) if b.kind is not BusKind.SLACK])
    pq = case.indices_of(BusKind.PQ)
    n_a, n_l = len(non_slack), len(pq)

    v = np.ones(n)
    delta = np.zeros(n)
    for i, b in enumerate(case.buses):
        if b.kind in (BusKind.SLACK, BusKind.PV):
            v[i] = b.v_setpoint
    if warm_start is not None:
        v[pq] = warm_start.v[pq]
        delta[non_slack] = warm_start.delta[non_slack]

    p_spec = inj.p_injection[non_slack]
    q_spec = inj.q_injection

    def residual(v, delta):
        s = _complex_power(y_bus, v, delta)
        return np.concatenate([p_spec - s.real[non_slack], q_spec - s.imag[pq]])

    f = residual(v, delta)
    worst = float(np.max(np.abs(f)))
    iterations = 0
    converged = worst < tol
    while not converged and iterations < max_iter:
        u = v * np.exp(1j * delta)
        i_bus = y_bus @ u
        du = np.diag(u)
        # complex-form partial derivatives of S = diag(U) conj(Y U)
        ds_ddelta = 1j * du @ np.conj(np.diag(i_bus) - y_bus @ du)
        ds_dvm = np.diag(u / v) @ np.conj(np.diag(i_bus)) + du @ np.conj(y_bus @ np.diag(u / v))
        jac = np.empty((n_a + n_l, n_a + n_l))
        jac[:n_a, :n_a] = ds_ddelta.real[np.ix_(non_slack, non_slack)]
        jac[:n_a, n_a:] = ds_dvm.real[np.ix_(non_slack, pq)]
        jac[n_a:, :n_a] = ds_ddelta.imag[np.ix_(pq, non_slack)]
        jac[n_a:, n_a:] = ds_dvm.imag[np.ix_(pq, pq)]
        try:
            step = np.linalg.solve(jac, f)
        except np.linalg.LinAlgError as exc:
            raise SingularModelError(f"power flow Jacobian is singular: {exc}") from exc
        delta = delta.copy()
        v = v.copy()
        delta[non_slack] += step[:n_a]
        v[pq] += step[n_a:]
        iterations += 1
        if not (np.all(np.isfinite(v)) and np.all(v > 0) and np.all(np.isfinite(delta))):
            worst = float("inf")
            break
        f = residual(v, delta)
        worst = float(np.max(np.abs(f)))
        converged = worst < tol
    return PowerFlowSolution(
        v=v, delta=delta, converged=converged, iterations=iterations, max_mismatch=worst
    )


def mismatch(
    case: NetworkCase, inj: InjectionSet, sol: PowerFlowSolution
) -> tuple[np.ndarray, np.ndarray]:
    """Residuals of the solved equations: specified minus computed power.

    Returns (delta_p over non-slack buses, delta_q over PQ buses), both in
    case bus order.
    """
    adm = build_admittance(case)
    s = _complex_power(adm.g + 1j * adm.b, sol.v, sol.delta)
    non_slack = np.array([i for i, b in enumerate(case.buses) if b.kind is not BusKind.SLACK])
    pq = case.indices_of(BusKind.PQ)
    return inj.p_injection[non_slack] - s.real[non_slack], inj.q_injection - s.imag[pq]


def bus_power(case: NetworkCase, sol: PowerFlowSolution) -> tuple[np.ndarray, np.ndarray]:
    """Actual per-bus active and reactive network injections at a solution."""
    adm = build_admittance(case)
    s = _complex_power(adm.g + 1j * adm.b, sol.v, sol.delta)
    return s.real, s.imag
