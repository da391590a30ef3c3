"""Command-line front end: run scenarios, emit CSV trajectories and reports.

Configuration is a plain-text key = value format (documented in the README);
command-line flags override config values. Exit codes are a stable contract:
0 success and converged, 1 ran but not converged (or validation failed),
2 usage or config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import BUNDLED_CASES, load_case
from .controller import Gains, Limits
from .errors import ConfigError, VoltCtrlError
from .netcase import NetworkCase, build_admittance, parse_case, scale_loads
from .oracle import solve_centralized
from .powerflow import nominal_injections, solve_power_flow
from .sensitivity import partition_buses, rebased, voltage_sensitivity
from .simulate import (
    DailyResult,
    FaultResult,
    PlantMode,
    SimulationResult,
    default_daily_profile,
    run_daily,
    run_fault,
    run_static,
)

SCENARIO_KINDS = ("static", "fault", "daily", "powerflow", "sensitivity", "validate")

EXIT_OK = 0
EXIT_NOT_CONVERGED = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


@dataclass(frozen=True)
class RunConfig:
    """Fully defaulted run description; unknown config keys are rejected."""

    case_path: str | None = None
    scenario: str = "static"
    plant: PlantMode = PlantMode.NONLINEAR
    v_lo: float = 0.95
    v_hi: float = 1.05
    q_lo: float = -0.2
    q_hi: float = 0.2
    k_q: float = 1.0
    k_lam: float = 1.0
    k_mu: float = 1.0
    load_scale: float = 1.0
    trip: tuple[int, int, float | None] = (4, 5, None)
    profile: tuple[float, ...] | None = None
    out_dir: str = "out"
    tol: float = 1e-6
    horizon: float = 2e5
    hour_seconds: float = 3600.0
    reset_multipliers: bool = False

    def gains(self) -> Gains:
        return Gains(k_q=self.k_q, k_lam=self.k_lam, k_mu=self.k_mu)

    def limits_for(self, case: NetworkCase) -> Limits:
        part = partition_buses(case)
        return Limits.box(
            part.n_load,
            part.n_controlled,
            v_lo=self.v_lo,
            v_hi=self.v_hi,
            q_lo=self.q_lo,
            q_hi=self.q_hi,
        )


def parse_trip(spec: str, where: str = "trip") -> tuple[int, int, float | None]:
    """Parse 'a:b' or 'a:b@t' into (from_bus, to_bus, time or None)."""
    body, _, at = spec.partition("@")
    t_trip: float | None = None
    if at:
        try:
            t_trip = float(at)
        except ValueError:
            raise ConfigError(f"{where}: bad trip time {at!r}") from None
        if t_trip <= 0:
            raise ConfigError(f"{where}: trip time must be positive")
    a, sep, b = body.partition(":")
    if not sep:
        raise ConfigError(f"{where}: expected a:b or a:b@t, got {spec!r}")
    try:
        return int(a), int(b), t_trip
    except ValueError:
        raise ConfigError(f"{where}: bad branch endpoints in {spec!r}") from None


def _parse_bool(raw: str, where: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{where}: expected a boolean, got {raw!r}")


def _parse_float(raw: str, where: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(f"{where}: expected a number, got {raw!r}") from None
    if not np.isfinite(value):
        raise ConfigError(f"{where}: value must be finite")
    return value


def parse_config(text: str) -> RunConfig:
    """Parse the plain key = value config format; unknown keys are errors."""
    cfg = RunConfig()
    fields: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key = key.strip()
        value = value.strip()
        where = f"line {lineno}"
        if key == "case":
            fields["case_path"] = value
        elif key == "scenario":
            if value not in SCENARIO_KINDS:
                raise ConfigError(
                    f"{where}: scenario must be one of {', '.join(SCENARIO_KINDS)}"
                )
            fields["scenario"] = value
        elif key == "plant":
            try:
                fields["plant"] = PlantMode(value)
            except ValueError:
                raise ConfigError(
                    f"{where}: plant must be 'nonlinear' or 'linear'"
                ) from None
        elif key in ("v_lo", "v_hi", "q_lo", "q_hi", "k_q", "k_lam", "k_mu"):
            fields[key] = _parse_float(value, where)
        elif key == "load_scale":
            scale = _parse_float(value, where)
            if scale < 0:
                raise ConfigError(f"{where}: load_scale must be nonnegative")
            fields["load_scale"] = scale
        elif key == "trip":
            fields["trip"] = parse_trip(value, where)
        elif key == "profile":
            parts = [p for p in value.split(",") if p.strip()]
            if len(parts) != 24:
                raise ConfigError(
                    f"{where}: profile needs 24 comma-separated factors, got {len(parts)}"
                )
            fields["profile"] = tuple(_parse_float(p, where) for p in parts)
        elif key == "out":
            fields["out_dir"] = value
        elif key == "tol":
            tol = _parse_float(value, where)
            if tol <= 0:
                raise ConfigError(f"{where}: tol must be positive")
            fields["tol"] = tol
        elif key == "horizon":
            horizon = _parse_float(value, where)
            if horizon <= 0:
                raise ConfigError(f"{where}: horizon must be positive")
            fields["horizon"] = horizon
        elif key == "hour_seconds":
            hs = _parse_float(value, where)
            if hs <= 0:
                raise ConfigError(f"{where}: hour_seconds must be positive")
            fields["hour_seconds"] = hs
        elif key == "reset_multipliers":
            fields["reset_multipliers"] = _parse_bool(value, where)
        else:
            raise ConfigError(f"{where}: unknown key {key!r}")
    cfg = replace(cfg, **fields)
    if cfg.v_lo >= cfg.v_hi:
        raise ConfigError("v_lo must be below v_hi")
    if cfg.q_lo >= cfg.q_hi:
        raise ConfigError("q_lo must be below q_hi")
    return cfg


def load_network(cfg: RunConfig) -> NetworkCase:
    """Resolve the configured case: bundled name or file path, then scale."""
    if cfg.case_path is None:
        raise ConfigError("no case given; use --case or case = <path> in the config")
    if cfg.case_path in BUNDLED_CASES:
        case = load_case(cfg.case_path)
    else:
        path = Path(cfg.case_path)
        if not path.exists():
            raise ConfigError(f"case file not found: {cfg.case_path}")
        case = parse_case(path.read_text(), name=path.stem)
    if cfg.load_scale != 1.0:
        case = scale_loads(case, cfg.load_scale)
    return case


def _fmt(x: float) -> str:
    return f"{x:.12e}"


def emit_report(result: SimulationResult, case: NetworkCase, out_dir) -> list[Path]:
    """Write trajectory.csv, voltages_before_after.txt, and summary.txt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    part = partition_buses(case)
    pq_ids = [case.buses[i].id for i in part.pq]
    ctl_ids = [case.buses[i].id for i in part.controlled]

    traj_path = out / "trajectory.csv"
    header = (
        ["t"]
        + [f"q_{b}" for b in ctl_ids]
        + [f"v_{b}" for b in pq_ids]
        + ["lam_norm", "mu_norm", "cost"]
    )
    lines = [",".join(header)]
    traj = result.trajectory
    for k in range(len(traj)):
        state = traj.states[k]
        lam_norm = float(
            max(np.max(state.lam_hi, initial=0.0), np.max(state.lam_lo, initial=0.0))
        )
        mu_norm = float(
            max(np.max(state.mu_hi, initial=0.0), np.max(state.mu_lo, initial=0.0))
        )
        row = (
            [_fmt(traj.t[k])]
            + [_fmt(x) for x in state.q]
            + [_fmt(x) for x in traj.v[k]]
            + [_fmt(lam_norm), _fmt(mu_norm), _fmt(traj.cost[k])]
        )
        lines.append(",".join(row))
    traj_path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")

    bare = solve_power_flow(case, nominal_injections(case), max_iter=30)
    if not bare.converged:
        raise VoltCtrlError("uncontrolled power flow failed while writing the report")
    volt_path = out / "voltages_before_after.txt"
    ids = [b.id for b in case.buses]
    rows = [
        "bus    " + " ".join(f"{b:>7d}" for b in ids),
        "before " + " ".join(f"{v:7.4f}" for v in bare.v),
        "after  " + " ".join(f"{v:7.4f}" for v in result.final_v),
    ]
    volt_path.write_text("\n".join(rows) + "\n", encoding="utf-8", newline="\n")

    final_state = traj.states[-1]
    binding = []
    for label, mults, id_list in (
        ("v_hi", final_state.lam_hi, pq_ids),
        ("v_lo", final_state.lam_lo, pq_ids),
        ("q_hi", final_state.mu_hi, ctl_ids),
        ("q_lo", final_state.mu_lo, ctl_ids),
    ):
        for pos, value in enumerate(mults):
            if value > 1e-6:
                binding.append(f"{label} @ bus {id_list[pos]}")
    viol = result.violations
    summary = [
        f"converged: {'yes' if result.converged else 'no'}",
        f"final residual: {result.final_residual:.6e}",
        f"final cost: {traj.cost[-1]:.6f}",
        "binding constraints: " + (", ".join(binding) if binding else "none"),
        f"max violation v below: {viol.max_v_below:.6e}",
        f"max violation v above: {viol.max_v_above:.6e}",
        f"max violation q below: {viol.max_q_below:.6e}",
        f"max violation q above: {viol.max_q_above:.6e}",
        f"min multiplier: {viol.min_multiplier:.6e}",
    ]
    if isinstance(result, FaultResult):
        summary += [
            f"pre-trip cost: {result.pre_cost:.6f}",
            f"post-trip cost: {result.post_cost:.6f}",
            f"cost ratio: {result.cost_ratio:.4f}",
        ]
    if isinstance(result, DailyResult):
        unc = result.uncontrolled_v
        out_unc = int(
            np.sum((unc < 0.95 - 1e-9).any(axis=1) | (unc > 1.05 + 1e-9).any(axis=1))
        )
        ctl = result.hourly_final_v
        out_ctl = int(
            np.sum((ctl < 0.95 - 1e-3).any(axis=1) | (ctl > 1.05 + 1e-3).any(axis=1))
        )
        summary += [
            f"hours out of band uncontrolled: {out_unc}",
            f"hours out of band controlled: {out_ctl}",
        ]
    sum_path = out / "summary.txt"
    sum_path.write_text("\n".join(summary) + "\n", encoding="utf-8", newline="\n")
    return [traj_path, volt_path, sum_path]


def _cmd_run(cfg: RunConfig) -> int:
    case = load_network(cfg)
    limits = cfg.limits_for(case)
    gains = cfg.gains()
    if cfg.scenario == "static":
        result: SimulationResult = run_static(
            case,
            limits,
            gains,
            tol=cfg.tol,
            plant_mode=cfg.plant,
            horizon=cfg.horizon,
        )
    elif cfg.scenario == "fault":
        a, b, t_trip = cfg.trip
        result = run_fault(
            case,
            limits,
            gains,
            trip=(a, b),
            t_trip=t_trip,
            tol=cfg.tol,
            plant_mode=cfg.plant,
            horizon=cfg.horizon,
        )
    elif cfg.scenario == "daily":
        profile = (
            np.array(cfg.profile) if cfg.profile is not None else default_daily_profile()
        )
        result = run_daily(
            case,
            limits,
            gains,
            profile=profile,
            tol=cfg.tol,
            plant_mode=cfg.plant,
            hour_seconds=cfg.hour_seconds,
            reset_multipliers=cfg.reset_multipliers,
        )
    else:
        raise ConfigError(f"scenario {cfg.scenario!r} is not runnable via 'run'")
    paths = emit_report(result, case, cfg.out_dir)
    print(f"wrote {', '.join(str(p) for p in paths)}")
    print(
        f"converged: {'yes' if result.converged else 'no'}  "
        f"residual: {result.final_residual:.3e}  cost: {result.trajectory.cost[-1]:.6f}"
    )
    if isinstance(result, FaultResult):
        print(
            f"pre-trip cost {result.pre_cost:.6f}  post-trip cost {result.post_cost:.6f}"
            f"  ratio {result.cost_ratio:.4f}"
        )
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def _cmd_powerflow(cfg: RunConfig) -> int:
    case = load_network(cfg)
    sol = solve_power_flow(case, nominal_injections(case), max_iter=30)
    print(f"converged: {'yes' if sol.converged else 'no'}  iterations: {sol.iterations}")
    print(f"max mismatch: {sol.max_mismatch:.3e}")
    print("bus  magnitude  angle_deg")
    for i, bus in enumerate(case.buses):
        print(f"{bus.id:>3d}  {sol.v[i]:9.4f}  {np.degrees(sol.delta[i]):9.4f}")
    return EXIT_OK if sol.converged else EXIT_NOT_CONVERGED


def _cmd_sensitivity(cfg: RunConfig) -> int:
    case = load_network(cfg)
    part = partition_buses(case)
    sens = voltage_sensitivity(build_admittance(case), part)
    x = sens.x
    sym = float(np.max(np.abs(x - x.T)))
    eigmin = float(np.min(np.linalg.eigvalsh(0.5 * (x + x.T))))
    pq_ids = [case.buses[i].id for i in part.pq]
    print(f"load buses: {len(pq_ids)}  controlled: {part.n_controlled}")
    print(f"symmetry error: {sym:.3e}")
    print(f"min eigenvalue: {eigmin:.6e}")
    print("bus  dv/dq_self")
    for pos, b in enumerate(pq_ids):
        print(f"{b:>3d}  {x[pos, pos]:10.6f}")
    return EXIT_OK


def _cmd_validate(cfg: RunConfig) -> int:
    case = load_network(cfg)
    limits = cfg.limits_for(case)
    sol = solve_power_flow(case, nominal_injections(case), max_iter=30)
    if not sol.converged:
        raise VoltCtrlError("power flow did not converge at the base point")
    part = partition_buses(case)
    sens = rebased(
        voltage_sensitivity(build_admittance(case), part),
        base_v=sol.v[part.pq],
        base_q=np.zeros(part.n_load),
    )
    qp = solve_centralized(sens, limits)
    res = run_static(
        case, limits, cfg.gains(), tol=cfg.tol, plant_mode=PlantMode.LINEAR,
        horizon=cfg.horizon,
    )
    st = res.trajectory.states[-1]
    v = res.trajectory.v[-1]
    dq = float(np.max(np.abs(res.final_q - qp.q_star)))
    slack = np.concatenate(
        [limits.v_hi - v, v - limits.v_lo, limits.q_hi - st.q, st.q - limits.q_lo]
    )
    mults = np.concatenate([st.lam_hi, st.lam_lo, st.mu_hi, st.mu_lo])
    comp = float(np.max(np.abs(mults * slack)))
    checks = [
        ("controller converged", 1.0 if res.converged else 0.0, 0.5, "above"),
        ("|q_sim - q_oracle| inf norm", dq, 1e-4, "below"),
        ("max complementarity product", comp, 1e-4, "below"),
        ("oracle kkt residual", qp.kkt_residual, 1e-8, "below"),
    ]
    print(f"{'check':<32} {'value':>12} {'threshold':>12}  status")
    all_ok = True
    for name, value, threshold, sense in checks:
        ok = value > threshold if sense == "above" else value < threshold
        all_ok = all_ok and ok
        print(f"{name:<32} {value:>12.3e} {threshold:>12.3e}  {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if all_ok else EXIT_NOT_CONVERGED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voltctrl",
        description="Distributed feedback voltage control simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to a key = value config file")
    common.add_argument("--case", help="bundled case name or case file path")
    common.add_argument("--out", help="output directory for reports")
    common.add_argument(
        "--plant", choices=["nonlinear", "linear"], help="plant model for the loop"
    )
    common.add_argument("--scale", type=float, help="uniform load scale factor")
    common.add_argument("--trip", help="branch trip spec a:b or a:b@t")
    common.add_argument(
        "--seedless",
        action="store_true",
        help="accepted for CI symmetry; runs are deterministic by construction",
    )
    run_p = sub.add_parser("run", parents=[common], help="run a closed-loop scenario")
    run_p.add_argument(
        "--scenario", choices=["static", "fault", "daily"], help="scenario family"
    )
    sub.add_parser("powerflow", parents=[common], help="solve and print a power flow")
    sub.add_parser("sensitivity", parents=[common], help="print sensitivity matrix info")
    sub.add_parser("validate", parents=[common], help="compare dynamics to the QP oracle")
    return parser


def _merge_flags(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    updates: dict[str, object] = {}
    if args.case is not None:
        updates["case_path"] = args.case
    if args.out is not None:
        updates["out_dir"] = args.out
    if args.plant is not None:
        updates["plant"] = PlantMode(args.plant)
    if args.scale is not None:
        if args.scale < 0:
            raise ConfigError("--scale must be nonnegative")
        updates["load_scale"] = args.scale
    if args.trip is not None:
        updates["trip"] = parse_trip(args.trip, "--trip")
    if getattr(args, "scenario", None) is not None:
        updates["scenario"] = args.scenario
    return replace(cfg, **updates)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config is not None:
            path = Path(args.config)
            if not path.exists():
                raise ConfigError(f"config file not found: {args.config}")
            cfg = parse_config(path.read_text())
        else:
            cfg = RunConfig()
        cfg = _merge_flags(cfg, args)
        if args.command == "run":
            return _cmd_run(cfg)
        if args.command == "powerflow":
            return _cmd_powerflow(cfg)
        if args.command == "sensitivity":
            return _cmd_sensitivity(cfg)
        return _cmd_validate(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VoltCtrlError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
