"""Closed-loop quasi-static simulation of the controller against a plant.

The controller state follows its saddle-point dynamics while the voltage it
measures comes from an algebraic plant solved at the current injections:
either the full Newton power flow or the constant linear model. Integration
uses an adaptive implicit trapezoidal scheme with step-doubling error
control, which suits the moderately stiff projected dynamics. The projected
rates kink where multipliers reach zero; steps that would drive a
multiplier negative are cut back to land on the crossing, so trajectories
never leave the nonnegative orthant by more than the solver tolerance.

Three scenario families mirror the intended use: a static load held to
equilibrium, a line trip during operation, and a 24-hour load profile with
hourly base refresh.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .controller import (
    ControllerState,
    Gains,
    Limits,
    StateRates,
    dynamics_rhs,
    objective,
    unpack_state,
)
from .errors import ConfigError, PlantDivergenceError, StepSizeUnderflowError
from .netcase import NetworkCase, build_admittance, scale_loads, trip_branch
from .powerflow import InjectionSet, PowerFlowSolution, nominal_injections, solve_power_flow
from .sensitivity import (
    SensitivityMatrix,
    partition_buses,
    predict_voltage,
    rebased,
    voltage_sensitivity,
)


class PlantMode(Enum):
    NONLINEAR = "nonlinear"
    LINEAR = "linear"


@dataclass(frozen=True)
class TripBranch:
    from_bus: int
    to_bus: int


@dataclass(frozen=True)
class SetLoadScale:
    """Set the absolute load scale relative to the scenario's original case."""

    factor: float


@dataclass(frozen=True, eq=False)
class Scenario:
    """One closed-loop run: case, plant flavor, limits, events, horizon."""

    case: NetworkCase
    plant_mode: PlantMode = PlantMode.NONLINEAR
    limits: Limits | None = None
    gains: Gains = Gains()
    events: tuple = ()
    horizon: float = 2e5
    controller_period: float = 0.0
    initial_state: ControllerState | None = None
    rtol: float = 1e-6
    atol: float = 1e-8
    equilibrium_tol: float | None = 1e-6

    def __post_init__(self) -> None:
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")
        if self.controller_period < 0:
            raise ConfigError("controller_period must be nonnegative")
        times = [t for t, _ in self.events]
        if any(t2 <= t1 for t1, t2 in zip(times, times[1:])):
            raise ConfigError("event times must be strictly increasing")
        if any(t <= 0 or t >= self.horizon for t in times):
            raise ConfigError("event times must lie strictly inside the horizon")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Accepted-step samples: times, states, load-bus voltages, cost."""

    t: np.ndarray
    states: tuple[ControllerState, ...]
    v: np.ndarray
    cost: np.ndarray

    def __post_init__(self) -> None:
        if not (len(self.t) == len(self.states) == self.v.shape[0] == len(self.cost)):
            raise ValueError("trajectory arrays disagree on sample count")
        if len(self.t) > 1 and not np.all(np.diff(self.t) > 0):
            raise ValueError("trajectory times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.t)


@dataclass(frozen=True, eq=False)
class ViolationSummary:
    """Worst constraint excursions seen anywhere along the trajectory."""

    max_v_below: float
    max_v_above: float
    max_q_below: float
    max_q_above: float
    min_multiplier: float


@dataclass(frozen=True, eq=False)
class SimulationResult:
    trajectory: Trajectory
    final_v: np.ndarray
    final_q: np.ndarray
    converged: bool
    final_residual: float
    violations: ViolationSummary


@dataclass(frozen=True, eq=False)
class FaultResult(SimulationResult):
    pre_cost: float = 0.0
    post_cost: float = 0.0
    cost_ratio: float = 0.0
    pre_q: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass(frozen=True, eq=False)
class DailyResult(SimulationResult):
    hourly_final_q: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    hourly_final_v: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    uncontrolled_v: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))


class _Plant:
    """Algebraic plant: voltage at load buses as a function of controller q.

    Owns the case-derived matrices and, in nonlinear mode, the warm-start
    solution reused across evaluations.
    """

    def __init__(self, case: NetworkCase, mode: PlantMode):
        self.case = case
        self.mode = mode
        self.part = partition_buses(case)
        self.inj = nominal_injections(case)
        self.cpos = self.part.controlled_in_pq()
        self.sens = voltage_sensitivity(build_admittance(case), self.part)
        self.last: PowerFlowSolution | None = None

    def embed(self, q: np.ndarray) -> np.ndarray:
        full = np.zeros(self.part.n_load)
        full[self.cpos] = q
        return full

    def _solve(self, q: np.ndarray) -> PowerFlowSolution:
        inj = InjectionSet(
            self.inj.p_injection, self.inj.q_injection + self.embed(q)
        )
        sol = solve_power_flow(self.case, inj, warm_start=self.last)
        if not sol.converged:
            raise PlantDivergenceError(
                f"power flow lost convergence (mismatch {sol.max_mismatch:.3e})"
            )
        self.last = sol
        return sol

    def rebase(self, q: np.ndarray) -> None:
        """Re-solve at the given controller output and relinearize there."""
        sol = self._solve(q)
        self.sens = rebased(self.sens, base_v=sol.v[self.part.pq], base_q=self.embed(q))

    def voltage(self, q: np.ndarray) -> np.ndarray:
        if self.mode is PlantMode.LINEAR:
            return predict_voltage(self.sens, self.embed(q))
        return self._solve(q).v[self.part.pq]

    def report_voltage(self, q: np.ndarray) -> np.ndarray:
        """All-bus magnitudes for reporting; regulated buses from the base solve."""
        if self.last is None:
            raise PlantDivergenceError("no plant solution available")
        full = self.last.v.copy()
        if self.mode is PlantMode.LINEAR:
            full[self.part.pq] = predict_voltage(self.sens, self.embed(q))
        return full


def _mask_jacobian(plant: _Plant, lim: Limits, gains: Gains, state: ControllerState, v):
    """Piecewise-constant Jacobian of the projected rates at one state."""
    xc = plant.sens.x[:, plant.cpos]
    m, c = xc.shape
    n = 3 * c + 2 * m
    jac = np.zeros((n, n))
    sl_q = slice(0, c)
    sl_lh = slice(c, c + m)
    sl_ll = slice(c + m, c + 2 * m)
    sl_mh = slice(c + 2 * m, 2 * c + 2 * m)
    sl_ml = slice(2 * c + 2 * m, n)
    jac[sl_q, sl_q] = -2.0 * gains.k_q * np.eye(c)
    jac[sl_q, sl_lh] = -gains.k_q * xc.T
    jac[sl_q, sl_ll] = gains.k_q * xc.T
    jac[sl_q, sl_mh] = -gains.k_q * np.eye(c)
    jac[sl_q, sl_ml] = gains.k_q * np.eye(c)
    on_lh = (state.lam_hi > 0) | (v - lim.v_hi > 0)
    on_ll = (state.lam_lo > 0) | (lim.v_lo - v > 0)
    on_mh = (state.mu_hi > 0) | (state.q - lim.q_hi > 0)
    on_ml = (state.mu_lo > 0) | (lim.q_lo - state.q > 0)
    jac[sl_lh, sl_q] = gains.k_lam * (on_lh[:, None] * xc)
    jac[sl_ll, sl_q] = -gains.k_lam * (on_ll[:, None] * xc)
    jac[sl_mh, sl_q] = gains.k_mu * np.diag(on_mh.astype(float))
    jac[sl_ml, sl_q] = -gains.k_mu * np.diag(on_ml.astype(float))
    return jac


class _TrialFailure(Exception):
    """Internal: this step attempt must be retried with a smaller h."""


class _Stepper:
    """Implicit trapezoid with simplified Newton on the projected dynamics."""

    def __init__(self, plant: _Plant, lim: Limits, gains: Gains):
        self.plant = plant
        self.lim = lim
        self.gains = gains
        m, c = plant.part.n_load, len(plant.cpos)
        self.m, self.c = m, c

    def eval(self, y: np.ndarray):
        """Rates and measured voltage at a packed state (multipliers floored)."""
        y = y.copy()
        y[self.c :] = np.maximum(y[self.c :], 0.0)
        state = unpack_state(y, self.m, self.c)
        v = self.plant.voltage(state.q)
        rates = dynamics_rhs(state, v, self.plant.sens, self.lim, self.gains)
        return rates.packed(), v, state

    def _implicit(self, y0: np.ndarray, f0: np.ndarray, h: float) -> np.ndarray:
        """Solve z = y0 + h/2 (f0 + g(z)) by mask-aware simplified Newton."""
        z = y0 + h * f0
        for _ in range(15):
            try:
                g, v, state = self.eval(z)
            except PlantDivergenceError as exc:
                raise _TrialFailure(str(exc)) from exc
            resid = z - y0 - 0.5 * h * (f0 + g)
            if np.max(np.abs(resid)) < 1e-11 * max(1.0, float(np.max(np.abs(z)))):
                return z
            jac = _mask_jacobian(self.plant, self.lim, self.gains, state, v)
            lhs = np.eye(len(y0)) - 0.5 * h * jac
            try:
                dz = np.linalg.solve(lhs, resid)
            except np.linalg.LinAlgError as exc:
                raise _TrialFailure(f"implicit solve singular: {exc}") from exc
            z = z - dz
            if not np.all(np.isfinite(z)):
                raise _TrialFailure("implicit iteration diverged")
        raise _TrialFailure("implicit iteration did not converge")

    def attempt(self, y0: np.ndarray, f0: np.ndarray, h: float):
        """One error-controlled trapezoid step (step-doubling estimate)."""
        y_full = self._implicit(y0, f0, h)
        y_half = self._implicit(y0, f0, h / 2)
        try:
            f_half, _, _ = self.eval(y_half)
        except PlantDivergenceError as exc:
            raise _TrialFailure(str(exc)) from exc
        y_two = self._implicit(y_half, f_half, h / 2)
        return y_full, y_two


def _multiplier_crossing_fraction(y0: np.ndarray, y1: np.ndarray, c: int) -> float:
    """Largest fraction of the step that keeps all multipliers >= 0."""
    frac = 1.0
    m0, m1 = y0[c:], y1[c:]
    for a, b in zip(m0, m1):
        if b < -1e-12 and a > 0:
            frac = min(frac, a / (a - b))
    return frac


class _Recorder:
    def __init__(self, lim: Limits):
        self.lim = lim
        self.t: list[float] = []
        self.states: list[ControllerState] = []
        self.v: list[np.ndarray] = []
        self.cost: list[float] = []
        self.max_v_below = 0.0
        self.max_v_above = 0.0
        self.max_q_below = 0.0
        self.max_q_above = 0.0
        self.min_multiplier = 0.0

    def add(self, t: float, state: ControllerState, v: np.ndarray, raw_min_mult: float):
        # boundary samples (events, segment starts) may collide in time
        if self.t and t <= self.t[-1]:
            t = self.t[-1] + 1e-9
        self.t.append(t)
        self.states.append(state)
        self.v.append(v.copy())
        self.cost.append(objective(state.q))
        self.max_v_below = max(self.max_v_below, float(np.max(self.lim.v_lo - v)))
        self.max_v_above = max(self.max_v_above, float(np.max(v - self.lim.v_hi)))
        self.max_q_below = max(self.max_q_below, float(np.max(self.lim.q_lo - state.q)))
        self.max_q_above = max(self.max_q_above, float(np.max(state.q - self.lim.q_hi)))
        self.min_multiplier = min(self.min_multiplier, raw_min_mult)

    def build(self) -> Trajectory:
        return Trajectory(
            t=np.array(self.t),
            states=tuple(self.states),
            v=np.array(self.v),
            cost=np.array(self.cost),
        )

    def summary(self) -> ViolationSummary:
        return ViolationSummary(
            max_v_below=self.max_v_below,
            max_v_above=self.max_v_above,
            max_q_below=self.max_q_below,
            max_q_above=self.max_q_above,
            min_multiplier=self.min_multiplier,
        )


def _snap(y: np.ndarray, c: int) -> np.ndarray:
    out = y.copy()
    out[c:] = np.maximum(out[c:], 0.0)
    return out


def _integrate_window(
    stepper: _Stepper,
    recorder: _Recorder,
    y: np.ndarray,
    t0: float,
    t1: float,
    rtol: float,
    atol: float,
    equilibrium_tol: float | None,
    fixed_step: float | None,
    record_start: bool,
):
    """Advance the state from t0 to t1 (or to equilibrium). Returns (y, t, residual, hit)."""
    c = stepper.c
    f, v, state = stepper.eval(y)
    if record_start:
        recorder.add(t0, state, v, float(np.min(y[c:])))
    residual = float(np.max(np.abs(f)))
    if equilibrium_tol is not None and residual < equilibrium_tol:
        return y, t0, residual, True
    t = t0
    h = fixed_step if fixed_step else min(0.1, t1 - t0)
    while t < t1 - 1e-9 * max(1.0, t1):
        if fixed_step:
            h_try = min(fixed_step, t1 - t)
            try:
                y_new = stepper._implicit(y, f, h_try)
            except _TrialFailure as exc:
                raise StepSizeUnderflowError(f"fixed step {h_try} failed: {exc}") from exc
            raw_min = float(np.min(y_new[c:]))
            y = _snap(y_new, c)
            t += h_try
            f, v, state = stepper.eval(y)
            recorder.add(t, state, v, raw_min)
            residual = float(np.max(np.abs(f)))
            continue
        h_try = min(h, t1 - t)
        if h_try < 1e-13 * max(1.0, t):
            raise StepSizeUnderflowError(f"step size underflow at t={t:.6g}")
        try:
            y_full, y_two = stepper.attempt(y, f, h_try)
        except _TrialFailure:
            h = 0.5 * h_try
            continue
        crossing = (y_two[c:] < -1e-12) & (y[c:] > 0)
        tiny = crossing & (y[c:] <= 1e-9)
        if np.any(tiny):
            # a residual-level dual is decaying through zero: clamp it so the
            # projected rates hold it there, then retry the same step
            y = y.copy()
            y[c:][tiny] = 0.0
            f, v, state = stepper.eval(y)
            continue
        frac = _multiplier_crossing_fraction(y, y_two, c)
        if frac < 1.0 and h_try * frac > 1e-10:
            # land on the multiplier zero crossing instead of overshooting
            h = max(h_try * frac, 1e-10)
            continue
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_two))
        err = float(np.max(np.abs(y_two - y_full) / (3.0 * scale)))
        if err > 1.0:
            h = h_try * max(0.2, 0.9 * err ** (-1.0 / 3.0))
            continue
        raw_min = float(np.min(y_two[c:]))
        y = _snap(y_two, c)
        t += h_try
        f, v, state = stepper.eval(y)
        recorder.add(t, state, v, raw_min)
        residual = float(np.max(np.abs(f)))
        if equilibrium_tol is not None and residual < equilibrium_tol:
            return y, t, residual, True
        growth = min(5.0, max(0.2, 0.9 * err ** (-1.0 / 3.0))) if err > 0 else 5.0
        h = h_try * growth
    return y, t, residual, False


def _shift_after(prev_last: float, times: np.ndarray, offset: float) -> np.ndarray:
    """Offset a segment's times, nudging the first sample past prev_last."""
    out = times + offset
    if len(out) and out[0] <= prev_last:
        out = out.copy()
        out[0] = prev_last + 1e-9
    return out


def _apply_events(case: NetworkCase, trips: list[TripBranch], scale: float | None) -> NetworkCase:
    out = case
    if scale is not None:
        out = scale_loads(out, scale)
    for trip in trips:
        out = trip_branch(out, trip.from_bus, trip.to_bus)
    return out


def integrate(scenario: Scenario, fixed_step: float | None = None) -> SimulationResult:
    """Run one scenario to its horizon, equilibrium, or failure.

    Events rebuild the plant and sensitivity and relinearize at the current
    controller output. ``fixed_step`` disables the error control and takes
    plain trapezoid steps (diagnostics only).
    """
    part = partition_buses(scenario.case)
    lim = scenario.limits if scenario.limits is not None else Limits.box(
        part.n_load, part.n_controlled
    )
    plant = _Plant(scenario.case, scenario.plant_mode)
    state0 = (
        scenario.initial_state
        if scenario.initial_state is not None
        else ControllerState.zeros(part.n_load, part.n_controlled)
    )
    plant.rebase(state0.q)
    stepper = _Stepper(plant, lim, scenario.gains)
    recorder = _Recorder(lim)
    y = state0.packed()

    mark_map: dict[float, object] = {}
    if scenario.controller_period > 0:
        k = 1
        while k * scenario.controller_period < scenario.horizon:
            mark_map[k * scenario.controller_period] = None
            k += 1
    for t_ev, event in scenario.events:
        if not isinstance(event, (TripBranch, SetLoadScale)):
            raise ConfigError(f"unsupported event type: {type(event).__name__}")
        mark_map[float(t_ev)] = event
    mark_map[scenario.horizon] = None
    marks = sorted(mark_map.items())

    trips: list[TripBranch] = []
    load_scale: float | None = None
    t = 0.0
    residual = np.inf
    record_start = True
    for t_mark, event in marks:
        y, t_end, residual, hit = _integrate_window(
            stepper,
            recorder,
            y,
            t,
            t_mark,
            scenario.rtol,
            scenario.atol,
            scenario.equilibrium_tol,
            fixed_step,
            record_start=record_start,
        )
        record_start = False
        if t_mark == scenario.horizon:
            t = t_end
            break
        t = t_mark
        if isinstance(event, TripBranch):
            trips.append(event)
            plant = _Plant(_apply_events(scenario.case, trips, load_scale), plant.mode)
            stepper = _Stepper(plant, lim, scenario.gains)
            record_start = True
        elif isinstance(event, SetLoadScale):
            load_scale = event.factor
            plant = _Plant(_apply_events(scenario.case, trips, load_scale), plant.mode)
            stepper = _Stepper(plant, lim, scenario.gains)
            record_start = True
        # refresh the linearization point at the current output
        state = unpack_state(_snap(y, stepper.c), stepper.m, stepper.c)
        plant.rebase(state.q)

    state = unpack_state(_snap(y, stepper.c), stepper.m, stepper.c)
    converged = bool(
        scenario.equilibrium_tol is not None and residual < scenario.equilibrium_tol
    )
    return SimulationResult(
        trajectory=recorder.build(),
        final_v=plant.report_voltage(state.q),
        final_q=state.q.copy(),
        converged=converged,
        final_residual=float(residual),
        violations=recorder.summary(),
    )


def run_static(
    case: NetworkCase,
    limits: Limits | None = None,
    gains: Gains = Gains(),
    tol: float = 1e-6,
    plant_mode: PlantMode = PlantMode.NONLINEAR,
    horizon: float = 2e5,
    initial_state: ControllerState | None = None,
) -> SimulationResult:
    """Hold the load constant and integrate until the dynamics settle."""
    scenario = Scenario(
        case=case,
        plant_mode=plant_mode,
        limits=limits,
        gains=gains,
        horizon=horizon,
        equilibrium_tol=tol,
        initial_state=initial_state,
    )
    return integrate(scenario)


def run_fault(
    case: NetworkCase,
    limits: Limits | None = None,
    gains: Gains = Gains(),
    trip: tuple[int, int] = (4, 5),
    t_trip: float | None = None,
    tol: float = 1e-6,
    plant_mode: PlantMode = PlantMode.NONLINEAR,
    horizon: float = 2e5,
) -> FaultResult:
    """Trip a branch mid-run and settle again; report both costs.

    With ``t_trip`` unset the pre-trip phase runs to equilibrium first, so
    the reported costs are the two equilibrium costs. With an explicit
    ``t_trip`` the line drops at that instant whether or not the controller
    has settled, and the pre cost is read off the last pre-trip sample.
    """
    if t_trip is not None:
        scenario = Scenario(
            case=case,
            plant_mode=plant_mode,
            limits=limits,
            gains=gains,
            events=((t_trip, TripBranch(trip[0], trip[1])),),
            horizon=t_trip + horizon,
            equilibrium_tol=tol,
        )
        res = integrate(scenario)
        pre_mask = res.trajectory.t <= t_trip
        pre_idx = int(np.max(np.nonzero(pre_mask)[0]))
        pre_cost = float(res.trajectory.cost[pre_idx])
        post_cost = float(res.trajectory.cost[-1])
        return FaultResult(
            trajectory=res.trajectory,
            final_v=res.final_v,
            final_q=res.final_q,
            converged=res.converged,
            final_residual=res.final_residual,
            violations=res.violations,
            pre_cost=pre_cost,
            post_cost=post_cost,
            cost_ratio=post_cost / pre_cost if pre_cost > 0 else float("inf"),
            pre_q=res.trajectory.states[pre_idx].q.copy(),
        )
    pre = run_static(case, limits, gains, tol, plant_mode, horizon)
    t_at_trip = float(pre.trajectory.t[-1])
    tripped = trip_branch(case, trip[0], trip[1])
    last_state = pre.trajectory.states[-1]
    post = run_static(
        tripped, limits, gains, tol, plant_mode, horizon, initial_state=last_state
    )
    shift = _shift_after(t_at_trip, post.trajectory.t, t_at_trip)
    joined = Trajectory(
        t=np.concatenate([pre.trajectory.t, shift]),
        states=pre.trajectory.states + post.trajectory.states,
        v=np.vstack([pre.trajectory.v, post.trajectory.v]),
        cost=np.concatenate([pre.trajectory.cost, post.trajectory.cost]),
    )
    violations = ViolationSummary(
        max_v_below=max(pre.violations.max_v_below, post.violations.max_v_below),
        max_v_above=max(pre.violations.max_v_above, post.violations.max_v_above),
        max_q_below=max(pre.violations.max_q_below, post.violations.max_q_below),
        max_q_above=max(pre.violations.max_q_above, post.violations.max_q_above),
        min_multiplier=min(pre.violations.min_multiplier, post.violations.min_multiplier),
    )
    pre_cost = float(pre.trajectory.cost[-1])
    post_cost = float(post.trajectory.cost[-1])
    return FaultResult(
        trajectory=joined,
        final_v=post.final_v,
        final_q=post.final_q,
        converged=pre.converged and post.converged,
        final_residual=post.final_residual,
        violations=violations,
        pre_cost=pre_cost,
        post_cost=post_cost,
        cost_ratio=post_cost / pre_cost if pre_cost > 0 else float("inf"),
        pre_q=pre.final_q,
    )


def run_daily(
    case: NetworkCase,
    limits: Limits | None = None,
    gains: Gains = Gains(),
    profile=None,
    tol: float = 1e-6,
    plant_mode: PlantMode = PlantMode.NONLINEAR,
    hour_seconds: float = 3600.0,
    reset_multipliers: bool = False,
) -> DailyResult:
    """24 hourly load levels; the controller warm-starts hour to hour.

    Each hour scales the original case, re-solves the uncontrolled plant for
    comparison, relinearizes at the carried-over output, and integrates
    until equilibrium or the hour window ends. ``reset_multipliers`` zeroes
    the dual state at each hour boundary instead of carrying it.
    """
    if profile is None:
        profile = default_daily_profile()
    profile = np.asarray(profile, dtype=float)
    if profile.shape != (24,):
        raise ConfigError("daily profile needs exactly 24 load factors")
    if np.any(profile < 0):
        raise ConfigError("load factors must be nonnegative")
    part = partition_buses(case)
    lim = limits if limits is not None else Limits.box(part.n_load, part.n_controlled)
    state = ControllerState.zeros(part.n_load, part.n_controlled)
    times, states, volts, costs = [], [], [], []
    hourly_q, hourly_v, bare_v = [], [], []
    worst = ViolationSummary(0.0, 0.0, 0.0, 0.0, 0.0)
    converged_all = True
    residual = np.inf
    final_v = np.ones(case.n_buses)
    for hour, factor in enumerate(profile):
        hourly_case = scale_loads(case, float(factor))
        bare = solve_power_flow(hourly_case, nominal_injections(hourly_case))
        if not bare.converged:
            raise PlantDivergenceError(f"uncontrolled power flow failed at hour {hour}")
        bare_v.append(bare.v[part.pq].copy())
        if reset_multipliers:
            state = ControllerState(
                q=state.q,
                lam_hi=np.zeros(part.n_load),
                lam_lo=np.zeros(part.n_load),
                mu_hi=np.zeros(part.n_controlled),
                mu_lo=np.zeros(part.n_controlled),
            )
        res = run_static(
            hourly_case,
            lim,
            gains,
            tol,
            plant_mode,
            horizon=hour_seconds,
            initial_state=state,
        )
        offset = hour * hour_seconds
        prev_last = times[-1][-1] if times else -1.0
        times.append(_shift_after(prev_last, res.trajectory.t, offset))
        states.extend(res.trajectory.states)
        volts.append(res.trajectory.v)
        costs.append(res.trajectory.cost)
        hourly_q.append(res.final_q.copy())
        hourly_v.append(res.trajectory.v[-1].copy())
        state = res.trajectory.states[-1]
        converged_all = converged_all and res.converged
        residual = res.final_residual
        final_v = res.final_v
        worst = ViolationSummary(
            max_v_below=max(worst.max_v_below, res.violations.max_v_below),
            max_v_above=max(worst.max_v_above, res.violations.max_v_above),
            max_q_below=max(worst.max_q_below, res.violations.max_q_below),
            max_q_above=max(worst.max_q_above, res.violations.max_q_above),
            min_multiplier=min(worst.min_multiplier, res.violations.min_multiplier),
        )
    trajectory = Trajectory(
        t=np.concatenate(times),
        states=tuple(states),
        v=np.vstack(volts),
        cost=np.concatenate(costs),
    )
    return DailyResult(
        trajectory=trajectory,
        final_v=final_v,
        final_q=hourly_q[-1],
        converged=converged_all,
        final_residual=float(residual),
        violations=worst,
        hourly_final_q=np.array(hourly_q),
        hourly_final_v=np.array(hourly_v),
        uncontrolled_v=np.array(bare_v),
    )


def default_daily_profile() -> np.ndarray:
    """A plausible day: night valley around 0.7, evening peak around 1.2."""
    hours = np.arange(24)
    return np.round(
        0.95 - 0.25 * np.cos(2 * np.pi * (hours - 2.0) / 24.0) ** 2
        + 0.25 * np.exp(-0.5 * ((hours - 19.0) / 3.0) ** 2),
        4,
    )


@dataclass(frozen=True)
class CalibrationResult:
    factor: float
    max_error: float
    achieved: bool


def calibrate_load_scale(
    case: NetworkCase,
    target_v: dict[int, float],
    lo: float = 1.0,
    hi: float = 4.0,
    threshold: float = 0.02,
) -> CalibrationResult:
    """Search a uniform PQ load factor matching a target voltage profile.

    Minimizes the max-abs voltage error against ``target_v`` (bus id ->
    magnitude) over [lo, hi] by coarse grid plus golden-section refinement.
    ``achieved`` reports whether the best error clears ``threshold``.
    """
    index = case.bus_index()
    bus_ids = sorted(target_v)
    want = np.array([target_v[b] for b in bus_ids])
    rows = [index[b] for b in bus_ids]

    def err(k: float) -> float:
        scaled = scale_loads(case, k)
        sol = solve_power_flow(scaled, nominal_injections(scaled), max_iter=30)
        if not sol.converged:
            return np.inf
        return float(np.max(np.abs(sol.v[rows] - want)))

    grid = np.linspace(lo, hi, 61)
    errors = [err(k) for k in grid]
    best = int(np.argmin(errors))
    a = grid[max(best - 1, 0)]
    b = grid[min(best + 1, len(grid) - 1)]
    phi = (np.sqrt(5.0) - 1.0) / 2.0
    x1 = b - phi * (b - a)
    x2 = a + phi * (b - a)
    f1, f2 = err(x1), err(x2)
    for _ in range(60):
        if b - a < 1e-6:
            break
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - phi * (b - a)
            f1 = err(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + phi * (b - a)
            f2 = err(x2)
    k_star = (a + b) / 2.0
    e_star = err(k_star)
    return CalibrationResult(factor=float(k_star), max_error=e_star, achieved=e_star < threshold)
