"""Centralized quadratic program used to certify the distributed controller.

Solves min ||q||^2 subject to the linear voltage band and the injection box,

    v_lo <= base_v + X (q - base_q) <= v_hi,    q_lo <= q <= q_hi,

with a primal active-set iteration on the stacked constraint rows: start
feasible, walk toward the equality-constrained minimizer of the current
working set, add the first blocking row, drop rows whose multiplier turns
negative. Feasibility itself is certified up front by a small linear
program. The result carries the multipliers in the same four-vector layout
the dynamics use, so a converged trajectory can be checked against the true
optimum and its KKT certificate directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.optimize import linprog

from .controller import Limits
from .errors import InfeasibleProblemError
from .sensitivity import SensitivityMatrix


@dataclass(frozen=True, eq=False)
class QPSolution:
    """Primal/dual optimum of the centralized problem.

    ``active_sets`` maps constraint family to the binding positions:
    voltage entries index the load-bus ordering, box entries the controller
    ordering.
    """

    q_star: np.ndarray
    lam_hi: np.ndarray
    lam_lo: np.ndarray
    mu_hi: np.ndarray
    mu_lo: np.ndarray
    active_sets: dict[str, tuple[int, ...]]
    objective_value: float
    kkt_residual: float


def _constraint_rows(sens: SensitivityMatrix, lim: Limits):
    """Stack the problem as A q <= b, returning (A, b, M, C)."""
    cpos = sens.partition.controlled_in_pq()
    m, c = sens.partition.n_load, len(cpos)
    xc = sens.x[:, cpos]
    r = sens.base_v - xc @ sens.base_q[cpos]
    eye = np.eye(c)
    a = np.vstack([xc, -xc, eye, -eye])
    b = np.concatenate([lim.v_hi - r, r - lim.v_lo, lim.q_hi, -lim.q_lo])
    return a, b, m, c


def _feasible_point(a: np.ndarray, b: np.ndarray, c: int, tol: float) -> np.ndarray:
    """Min-violation LP: min t s.t. A q - b <= t. Certifies emptiness."""
    n_rows = len(b)
    a_ub = np.hstack([a, -np.ones((n_rows, 1))])
    cost = np.zeros(c + 1)
    cost[-1] = 1.0
    res = linprog(cost, A_ub=a_ub, b_ub=b, bounds=[(None, None)] * (c + 1), method="highs")
    if not res.success:
        raise InfeasibleProblemError(f"feasibility subproblem failed: {res.message}")
    if res.x[-1] > tol:
        raise InfeasibleProblemError(
            f"constraints admit no solution (best achievable violation {res.x[-1]:.3e})"
        )
    return res.x[:c]


def _equality_solve(a_w: np.ndarray, b_w: np.ndarray, c: int):
    """Minimize ||q||^2 subject to A_w q = b_w; returns (q, duals)."""
    if len(b_w) == 0:
        return np.zeros(c), np.zeros(0)
    gram = a_w @ a_w.T
    try:
        alpha = np.linalg.solve(gram, b_w)
    except np.linalg.LinAlgError:
        alpha, *_ = np.linalg.lstsq(gram, b_w, rcond=None)
    return a_w.T @ alpha, -2.0 * alpha


def _pack_solution(
    q: np.ndarray, duals: np.ndarray, working: list[int], sens, lim, m: int, c: int
) -> QPSolution:
    nu = np.zeros(2 * m + 2 * c)
    for row, d in zip(working, duals):
        nu[row] = max(d, 0.0)
    lam_hi, lam_lo = nu[:m], nu[m : 2 * m]
    mu_hi, mu_lo = nu[2 * m : 2 * m + c], nu[2 * m + c :]
    in_w = set(working)
    active = {
        "v_hi": tuple(i for i in range(m) if i in in_w),
        "v_lo": tuple(i - m for i in sorted(in_w) if m <= i < 2 * m),
        "q_hi": tuple(i - 2 * m for i in sorted(in_w) if 2 * m <= i < 2 * m + c),
        "q_lo": tuple(i - 2 * m - c for i in sorted(in_w) if i >= 2 * m + c),
    }
    residual = kkt_residual(q, (lam_hi, lam_lo, mu_hi, mu_lo), sens, lim)
    return QPSolution(
        q_star=q,
        lam_hi=lam_hi,
        lam_lo=lam_lo,
        mu_hi=mu_hi,
        mu_lo=mu_lo,
        active_sets=active,
        objective_value=float(q @ q),
        kkt_residual=residual,
    )


def solve_centralized(
    sens: SensitivityMatrix, lim: Limits, tol: float = 1e-10, max_iter: int = 2000
) -> QPSolution:
    """Two-phase active-set solve of the strictly convex certification QP.

    Raises :class:`InfeasibleProblemError` when the voltage band cannot be
    met inside the injection box (certified by the phase-one program).
    """
    a, b, m, c = _constraint_rows(sens, lim)
    q = _feasible_point(a, b, c, tol=1e-9)
    # clean up LP roundoff so the walk starts strictly inside tolerance
    working = [int(i) for i in np.nonzero(a @ q - b >= -1e-12)[0]]
    working = _independent_subset(a, working)
    for _ in range(max_iter):
        q_eq, duals = _equality_solve(a[working], b[working], c)
        if np.max(np.abs(q_eq - q)) <= tol:
            if len(working) == 0 or np.min(duals) >= -tol:
                return _pack_solution(q_eq, duals, working, sens, lim, m, c)
            working.pop(int(np.argmin(duals)))
            continue
        d = q_eq - q
        gain = a @ d
        slack = b - a @ q
        blockers = [i for i in range(len(b)) if i not in set(working) and gain[i] > 1e-14]
        step = 1.0
        hit = None
        for i in blockers:
            ratio = max(slack[i], 0.0) / gain[i]
            if ratio < step - 1e-15:
                step = ratio
                hit = i
        q = q + step * d
        if hit is not None:
            working.append(hit)
            working = _independent_subset(a, working)
    raise InfeasibleProblemError(f"active-set method did not settle in {max_iter} iterations")


def _independent_subset(a: np.ndarray, rows: list[int]) -> list[int]:
    """Greedily keep rows that stay linearly independent (latest first kept)."""
    kept: list[int] = []
    for i in reversed(rows):
        trial = kept + [i]
        if np.linalg.matrix_rank(a[trial]) == len(trial):
            kept = trial
    return kept


def enumerate_active_sets(sens: SensitivityMatrix, lim: Limits, tol: float = 1e-9) -> QPSolution:
    """Brute-force optimum by trying every candidate active set.

    Exponential in the constraint count; intended as an independent
    self-check for problems with at most three controllers.
    """
    a, b, m, c = _constraint_rows(sens, lim)
    if c > 3:
        raise ValueError("enumeration is only meant for C <= 3")
    rows = range(len(b))
    best: QPSolution | None = None
    for size in range(c + 1):
        for subset in combinations(rows, size):
            a_w = a[list(subset)]
            if size and np.linalg.matrix_rank(a_w) < size:
                continue
            q, duals = _equality_solve(a_w, b[list(subset)], c)
            if size and np.max(np.abs(a_w @ q - b[list(subset)])) > 1e-8:
                continue
            if np.max(a @ q - b) > tol:
                continue
            if size and np.min(duals) < -tol:
                continue
            if best is None or q @ q < best.objective_value - 1e-15:
                best = _pack_solution(q, duals, list(subset), sens, lim, m, c)
    if best is None:
        raise InfeasibleProblemError("no feasible active set exists")
    return best


def kkt_residual(q: np.ndarray, multipliers, sens: SensitivityMatrix, lim: Limits) -> float:
    """Worst violation of stationarity, feasibility, dual sign, or slackness.

    ``multipliers`` is the tuple (lam_hi, lam_lo, mu_hi, mu_lo).
    """
    lam_hi, lam_lo, mu_hi, mu_lo = multipliers
    cpos = sens.partition.controlled_in_pq()
    xc = sens.x[:, cpos]
    v = sens.base_v + xc @ (q - sens.base_q[cpos])
    stationarity = 2.0 * q + xc.T @ (lam_hi - lam_lo) + mu_hi - mu_lo
    pieces = [
        stationarity,
        np.maximum(v - lim.v_hi, 0.0),
        np.maximum(lim.v_lo - v, 0.0),
        np.maximum(q - lim.q_hi, 0.0),
        np.maximum(lim.q_lo - q, 0.0),
        np.maximum(-lam_hi, 0.0),
        np.maximum(-lam_lo, 0.0),
        np.maximum(-mu_hi, 0.0),
        np.maximum(-mu_lo, 0.0),
        lam_hi * (v - lim.v_hi),
        lam_lo * (lim.v_lo - v),
        mu_hi * (q - lim.q_hi),
        mu_lo * (lim.q_lo - q),
    ]
    return float(max(np.max(np.abs(p)) if len(p) else 0.0 for p in pieces))
