"""Linear voltage model used by the controllers.

Starting from the decoupled power flow approximation (small angle spreads,
susceptance dominating conductance), angles are eliminated under the
assumption that active injections do not change, leaving a single constant
matrix X that maps reactive-injection changes at load buses to voltage
magnitude changes there:

    delta_v = X @ delta_q,   X = -(G_LA B_AA^-1 G_AL + B_LL)^-1

with A the non-slack buses and L the PQ buses. X is built once per topology
and reused; the linearization point (base_v, base_q) is refreshed from the
plant solution whenever a scenario starts or the topology changes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import SingularModelError
from .netcase import AdmittanceMatrices, BusKind, NetworkCase


@dataclass(frozen=True, eq=False)
class BusPartition:
    """Positional bus-index sets for one case ordering.

    ``pq`` has M entries (load buses), ``controlled`` the C <= M buses that
    host a reactive source. All values index into the case's bus sequence.
    """

    slack: int
    pv: np.ndarray
    pq: np.ndarray
    controlled: np.ndarray

    def __post_init__(self) -> None:
        if not set(self.controlled) <= set(self.pq):
            raise ValueError("controlled buses must be load buses")

    @property
    def n_load(self) -> int:
        return len(self.pq)

    @property
    def n_controlled(self) -> int:
        return len(self.controlled)

    def controlled_in_pq(self) -> np.ndarray:
        """Positions of the controlled buses within the pq ordering."""
        where = {int(b): i for i, b in enumerate(self.pq)}
        return np.array([where[int(b)] for b in self.controlled], dtype=int)


@dataclass(frozen=True, eq=False)
class SensitivityMatrix:
    """Constant M x M voltage/reactive-power sensitivity with its base point."""

    x: np.ndarray
    partition: BusPartition
    base_v: np.ndarray
    base_q: np.ndarray

    def __post_init__(self) -> None:
        m = self.partition.n_load
        if self.x.shape != (m, m) or len(self.base_v) != m or len(self.base_q) != m:
            raise ValueError("sensitivity dimensions do not match the partition")


def partition_buses(case: NetworkCase) -> BusPartition:
    """Classify buses by kind; controlled = PQ buses hosting a reactive source."""
    controlled = np.array(
        [i for i, b in enumerate(case.buses) if b.has_controller], dtype=int
    )
    return BusPartition(
        slack=case.slack_index,
        pv=case.indices_of(BusKind.PV),
        pq=case.indices_of(BusKind.PQ),
        controlled=controlled,
    )


def voltage_sensitivity(
    adm: AdmittanceMatrices,
    part: BusPartition,
    base_v: np.ndarray | None = None,
    base_q: np.ndarray | None = None,
) -> SensitivityMatrix:
    """Build X by angle elimination over non-slack buses.

    The base point defaults to a flat profile (v = 1, q = 0) and is normally
    supplied from a solved power flow. Raises :class:`SingularModelError`
    when a reduced block cannot be inverted, which signals a disconnected
    or degenerate network.
    """
    a_set = np.sort(np.concatenate([part.pv, part.pq]))
    l_set = part.pq
    b_aa = adm.b[np.ix_(a_set, a_set)]
    g_al = adm.g[np.ix_(a_set, l_set)]
    g_la = adm.g[np.ix_(l_set, a_set)]
    b_ll = adm.b[np.ix_(l_set, l_set)]
    try:
        core = g_la @ np.linalg.solve(b_aa, g_al) + b_ll
        x = np.linalg.inv(-core)
    except np.linalg.LinAlgError as exc:
        raise SingularModelError(f"voltage sensitivity is not defined: {exc}") from exc
    m = part.n_load
    if base_v is None:
        base_v = np.ones(m)
    if base_q is None:
        base_q = np.zeros(m)
    return SensitivityMatrix(
        x=x, partition=part, base_v=np.asarray(base_v, dtype=float), base_q=np.asarray(base_q, dtype=float)
    )


def predict_voltage(sens: SensitivityMatrix, q: np.ndarray) -> np.ndarray:
    """Linear plant: v = base_v + X (q - base_q), q over all load buses."""
    q = np.asarray(q, dtype=float)
    if q.shape != sens.base_q.shape:
        raise ValueError(f"expected {sens.base_q.shape[0]} injections, got {q.shape}")
    return sens.base_v + sens.x @ (q - sens.base_q)


def rebased(sens: SensitivityMatrix, base_v: np.ndarray, base_q: np.ndarray) -> SensitivityMatrix:
    """Same X, new linearization point."""
    return replace(
        sens, base_v=np.asarray(base_v, dtype=float), base_q=np.asarray(base_q, dtype=float)
    )


def neighbor_truncated(
    sens: SensitivityMatrix, case: NetworkCase, hops: int = 1
) -> SensitivityMatrix:
    """Zero out X entries between load buses farther than ``hops`` apart.

    Experimental: restricts the simulated communication to the electrical
    neighborhood instead of the full dense coupling. Truncation changes the
    dynamics and, in general, the equilibrium; nothing here claims otherwise.
    """
    if hops < 0:
        raise ValueError("hops must be nonnegative")
    n = case.n_buses
    index = case.bus_index()
    adj = np.eye(n, dtype=bool)
    for br in case.branches:
        if br.in_service:
            f, t = index[br.from_bus], index[br.to_bus]
            adj[f, t] = adj[t, f] = True
    reach = np.eye(n, dtype=bool)
    for _ in range(hops):
        reach = reach @ adj
    mask = reach[np.ix_(sens.partition.pq, sens.partition.pq)]
    return replace(sens, x=np.where(mask, sens.x, 0.0))
