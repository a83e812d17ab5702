"""
Unbalanced radial feeder and its linearized voltage sensitivities.

Squared voltage magnitudes at every supply point are modelled with the
unbalanced LinDistFlow approximation (no losses)

    V(t) = V0 - R P(t) - X Q(t)

where R and X are built from the impedance of the path shared by two
supply points and the 120 degree phase rotation between their phases.

Units
-----
Impedances are given in ohms together with a per-phase power base
``s_base_kva`` and a phase-to-neutral voltage base ``v_base_kv``.  The
sensitivity matrices are returned in p.u.^2 per kW (per kVAR for X), so
loads and EV schedules can be passed in kW directly.  A feeder without
bases is taken to be already in per-unit and no scaling is applied.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, InvalidQueryError, ModelError

OMEGA = np.exp(-2j * np.pi / 3)


class Phase(enum.IntEnum):
    a = 0
    b = 1
    c = 2

    @classmethod
    def parse(cls, label) -> "Phase":
        if isinstance(label, Phase):
            return label
        try:
            return cls[str(label).strip().lower()]
        except KeyError:
            raise InvalidQueryError(f"unknown phase {label!r}") from None


def parse_phases(spec) -> tuple[Phase, ...]:
    """Parse ``"abc"``, ``"a,c"`` or an iterable of labels into sorted phases."""
    if isinstance(spec, str):
        labels = [ch for ch in spec.replace(",", "").replace(" ", "")]
    else:
        labels = list(spec)
    phases = sorted({Phase.parse(p) for p in labels})
    if not phases:
        raise ModelError("empty phase set")
    return tuple(phases)


SupplyPoint = tuple  # (node id, Phase)


def format_supply_point(sp: SupplyPoint) -> str:
    return f"{sp[0]}:{Phase(sp[1]).name}"


def parse_supply_point(text) -> SupplyPoint:
    if isinstance(text, tuple):
        return (int(text[0]), Phase.parse(text[1]))
    node, _, ph = str(text).partition(":")
    if not ph:
        raise InvalidQueryError(f"supply point {text!r} is not of the form 'node:phase'")
    return (int(node), Phase.parse(ph))


@dataclass(frozen=True)
class LineSegment:
    """A line between ``from_node`` (parent) and ``to_node`` (child).

    ``impedance`` maps phase pairs to complex ohms; it is made symmetric on
    construction and missing pairs mean no (mutual) coupling.
    """

    from_node: int
    to_node: int
    phases: tuple[Phase, ...]
    impedance: Mapping[tuple[Phase, Phase], complex]

    def __post_init__(self):
        phases = parse_phases(self.phases)
        sym: dict[tuple[Phase, Phase], complex] = {}
        for (p, q), z in dict(self.impedance).items():
            p, q = Phase.parse(p), Phase.parse(q)
            if p not in phases or q not in phases:
                raise ModelError(
                    f"line {self.from_node}-{self.to_node}: impedance pair "
                    f"{p.name}{q.name} uses a phase the line does not carry"
                )
            z = complex(z)
            for key in ((p, q), (q, p)):
                if key in sym and not np.isclose(sym[key], z, rtol=1e-12, atol=0.0):
                    raise ModelError(
                        f"line {self.from_node}-{self.to_node}: asymmetric impedance "
                        f"for pair {p.name}{q.name}"
                    )
                sym[key] = z
        object.__setattr__(self, "phases", phases)
        object.__setattr__(self, "impedance", sym)

    def z(self, phi: Phase, phi_hat: Phase) -> complex:
        return self.impedance.get((phi, phi_hat), 0j)


@dataclass(frozen=True)
class FeederModel:
    """Radial multiphase feeder rooted at node 0.

    Parameters
    ----------
    lines : sequence of LineSegment
        Exactly one parent line per non-root node.
    v0 : float
        Squared source voltage magnitude at node 0 (p.u.^2).
    customers : sequence of supply points
        Supply point of each customer, in customer order.
    node_phases : mapping, optional
        Phases present at each non-root node; defaults to the phases of the
        node's parent line.
    s_base_kva, v_base_kv : float, optional
        Per-phase power base and phase-to-neutral voltage base.  Leave both
        unset for a feeder whose impedances are already per-unit.
    """

    lines: tuple[LineSegment, ...]
    v0: float = 1.0
    customers: tuple = ()
    node_phases: Mapping[int, tuple[Phase, ...]] = field(default_factory=dict)
    s_base_kva: float | None = None
    v_base_kv: float | None = None

    def __post_init__(self):
        lines = tuple(self.lines)
        parent: dict[int, LineSegment] = {}
        for ln in lines:
            if ln.to_node == 0:
                raise ModelError("the root node 0 cannot have a parent line")
            if ln.to_node in parent:
                raise ModelError(f"node {ln.to_node} has more than one parent line (non-radial)")
            if ln.from_node == ln.to_node:
                raise ModelError(f"self-loop at node {ln.to_node}")
            parent[ln.to_node] = ln
        nodes = {0} | set(parent)
        for ln in lines:
            if ln.from_node not in nodes:
                raise ModelError(f"line {ln.from_node}-{ln.to_node} starts at unknown node")
        # every node must reach the root without revisiting a node
        paths: dict[int, tuple[LineSegment, ...]] = {0: ()}
        for k in sorted(parent):
            chain, seen, node = [], set(), k
            while node != 0:
                if node in seen:
                    raise ModelError(f"cycle through node {node} (non-radial)")
                seen.add(node)
                ln = parent[node]
                chain.append(ln)
                node = ln.from_node
            paths[k] = tuple(reversed(chain))
        phases: dict[int, tuple[Phase, ...]] = {0: tuple(Phase)}
        declared = {int(k): parse_phases(v) for k, v in dict(self.node_phases).items()}
        for k in sorted(parent):
            line_ph = parent[k].phases
            ph = declared.get(k, line_ph)
            if not set(ph) <= set(line_ph):
                raise ModelError(f"node {k} declares phases its parent line does not carry")
            phases[k] = ph
        for k in sorted(parent):
            up = phases[parent[k].from_node]
            if not set(parent[k].phases) <= set(up):
                raise ModelError(f"line into node {k} carries phases absent upstream")
        if (self.s_base_kva is None) != (self.v_base_kv is None):
            raise ModelError("s_base_kva and v_base_kv must be given together")
        if self.v0 <= 0:
            raise ModelError("v0 must be positive")
        object.__setattr__(self, "lines", lines)
        object.__setattr__(self, "node_phases", phases)
        object.__setattr__(self, "_paths", paths)
        sps = tuple((k, p) for k in sorted(parent) for p in phases[k])
        object.__setattr__(self, "_supply_points", sps)
        object.__setattr__(self, "_sp_index", {sp: i for i, sp in enumerate(sps)})
        customers = tuple(parse_supply_point(c) for c in self.customers)
        for c in customers:
            if c not in self._sp_index:
                raise ModelError(f"customer attached to missing supply point {format_supply_point(c)}")
        object.__setattr__(self, "customers", customers)

    @property
    def nodes(self) -> tuple[int, ...]:
        return tuple(sorted(self._paths))

    @property
    def supply_points(self) -> tuple:
        return self._supply_points

    @property
    def n_supply(self) -> int:
        return len(self._supply_points)

    @property
    def n_customers(self) -> int:
        return len(self.customers)

    def supply_index(self, sp) -> int:
        sp = parse_supply_point(sp)
        try:
            return self._sp_index[sp]
        except KeyError:
            raise InvalidQueryError(f"no supply point {format_supply_point(sp)}") from None

    def path(self, node: int) -> tuple[LineSegment, ...]:
        try:
            return self._paths[node]
        except KeyError:
            raise InvalidQueryError(f"unknown node {node}") from None

    @property
    def customer_map(self) -> np.ndarray:
        """Dense 0/1 incidence of customers on supply points (supply x customer)."""
        ups = np.zeros((self.n_supply, self.n_customers))
        for n, sp in enumerate(self.customers):
            ups[self._sp_index[sp], n] = 1.0
        return ups

    def with_customers(self, customers: Iterable) -> "FeederModel":
        return FeederModel(
            lines=self.lines,
            v0=self.v0,
            customers=tuple(customers),
            node_phases={k: v for k, v in self.node_phases.items() if k != 0},
            s_base_kva=self.s_base_kva,
            v_base_kv=self.v_base_kv,
        )

    @property
    def impedance_scale(self) -> float:
        """Factor turning ohms times kW into p.u.^2."""
        if self.s_base_kva is None:
            return 1.0
        z_base = self.v_base_kv**2 * 1000.0 / self.s_base_kva
        return 1.0 / (z_base * self.s_base_kva)


def path_impedance(feeder: FeederModel, k: int, k_hat: int, phi, phi_hat) -> complex:
    """Impedance (ohms) of the lines shared by the root paths of two nodes."""
    phi, phi_hat = Phase.parse(phi), Phase.parse(phi_hat)
    for node, ph in ((k, phi), (k_hat, phi_hat)):
        if node == 0 or node not in feeder.node_phases:
            raise InvalidQueryError(f"node {node} is not a non-root feeder node")
        if ph not in feeder.node_phases[node]:
            raise InvalidQueryError(f"phase {ph.name} not present at node {node}")
    other = {ln.to_node for ln in feeder.path(k_hat)}
    shared = [ln for ln in feeder.path(k) if ln.to_node in other]
    return complex(sum((ln.z(phi, phi_hat) for ln in shared), 0j))


@dataclass(frozen=True)
class SensitivityMatrices:
    """R, X (supply x supply) and D = -R Upsilon (supply x customer).

    Entries are in p.u.^2 per kW (or kVAR).
    """

    R: np.ndarray
    X: np.ndarray
    D: np.ndarray
    v0: float

    @property
    def n_supply(self) -> int:
        return self.R.shape[0]

    def column(self, n: int) -> np.ndarray:
        return self.D[:, n]


def build_sensitivity(feeder: FeederModel) -> SensitivityMatrices:
    sps = feeder.supply_points
    kappa = len(sps)
    R = np.zeros((kappa, kappa))
    X = np.zeros((kappa, kappa))
    for i, (k, phi) in enumerate(sps):
        for j, (kh, phh) in enumerate(sps):
            z = path_impedance(feeder, k, kh, phi, phh)
            term = np.conj(z) * OMEGA ** (int(phi) - int(phh))
            R[i, j] = 2.0 * term.real
            X[i, j] = -2.0 * term.imag
    scale = feeder.impedance_scale
    R *= scale
    X *= scale
    D = -R @ feeder.customer_map
    for arr in (R, X, D):
        arr.setflags(write=False)
    return SensitivityMatrices(R=R, X=X, D=D, v0=feeder.v0)


@dataclass(frozen=True)
class BaselineSeries:
    """Non-EV load per supply point and step, shape (T, supply)."""

    p_kw: np.ndarray
    q_kvar: np.ndarray

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.p_kw, dtype=float))
        q = np.atleast_2d(np.asarray(self.q_kvar, dtype=float))
        if p.shape != q.shape:
            raise ContractError(f"baseline P {p.shape} and Q {q.shape} differ in shape")
        object.__setattr__(self, "p_kw", p)
        object.__setattr__(self, "q_kvar", q)

    @property
    def horizon(self) -> int:
        return self.p_kw.shape[0]

    def voltages(self, sens: SensitivityMatrices) -> np.ndarray:
        """Baseline squared voltages stacked by step (length supply*T)."""
        if self.p_kw.shape[1] != sens.n_supply:
            raise ContractError(
                f"baseline has {self.p_kw.shape[1]} supply points, feeder has {sens.n_supply}"
            )
        v = sens.v0 - self.p_kw @ sens.R.T - self.q_kvar @ sens.X.T
        return v.reshape(-1)


def voltage_profile(sens: SensitivityMatrices, baseline: BaselineSeries, x_fleet) -> np.ndarray:
    """Squared voltages (supply*T, step-major) with the fleet schedule applied.

    ``x_fleet`` is N x T in kW, rows in customer order.
    """
    x_fleet = np.atleast_2d(np.asarray(x_fleet, dtype=float))
    n_cust = sens.D.shape[1]
    if x_fleet.shape != (n_cust, baseline.horizon):
        raise ContractError(
            f"fleet schedule has shape {x_fleet.shape}, expected {(n_cust, baseline.horizon)}"
        )
    v_tilde = baseline.voltages(sens)
    return v_tilde + (sens.D @ x_fleet).T.reshape(-1)


def stack_block_diagonal(d_col: np.ndarray, horizon: int) -> np.ndarray:
    """Block-diagonal repetition of one customer's column over the horizon.

    Result has shape (supply*T, T); row ``t*supply + i`` maps x(t) to
    supply point ``i`` at step ``t``.
    """
    d_col = np.asarray(d_col, dtype=float).reshape(-1, 1)
    return np.kron(np.eye(horizon), d_col)


# --------------------------------------------------------------------------
# file formats


def feeder_from_dict(data: Mapping) -> FeederModel:
    """Build a feeder from the JSON layout used by scenario files."""
    bases = data.get("bases") or {}
    lines = []
    for raw in data["lines"]:
        imp = {}
        for pair, rx in raw.get("impedance_ohm", {}).items():
            if len(pair) != 2:
                raise ModelError(f"impedance key {pair!r} must name two phases, e.g. 'ab'")
            r, x = rx
            imp[(Phase.parse(pair[0]), Phase.parse(pair[1]))] = complex(r, x)
        lines.append(
            LineSegment(
                from_node=int(raw["from"]),
                to_node=int(raw["to"]),
                phases=parse_phases(raw["phases"]),
                impedance=imp,
            )
        )
    node_phases = {}
    for raw in data.get("nodes", []):
        if int(raw["id"]) != 0 and "phases" in raw:
            node_phases[int(raw["id"])] = parse_phases(raw["phases"])
    return FeederModel(
        lines=tuple(lines),
        v0=float(data.get("v0", 1.0)),
        customers=tuple(parse_supply_point(c) for c in data.get("customers", [])),
        node_phases=node_phases,
        s_base_kva=bases.get("s_base_kva"),
        v_base_kv=bases.get("v_base_kv"),
    )


def load_feeder(path) -> FeederModel:
    with open(path) as fh:
        return feeder_from_dict(json.load(fh))


def load_baseline(path, feeder: FeederModel, horizon: int) -> BaselineSeries:
    """Read ``time_index, supply_point_id, p_kw, q_kvar`` rows.

    Missing (step, supply point) pairs are zero load.
    """
    p = np.zeros((horizon, feeder.n_supply))
    q = np.zeros_like(p)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            t = int(row["time_index"])
            if not 0 <= t < horizon:
                raise ContractError(f"baseline time_index {t} outside horizon {horizon}")
            i = feeder.supply_index(row["supply_point_id"])
            p[t, i] += float(row["p_kw"])
            q[t, i] += float(row.get("q_kvar") or 0.0)
    return BaselineSeries(p, q)


def write_baseline(path, feeder: FeederModel, baseline: BaselineSeries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_index", "supply_point_id", "p_kw", "q_kvar"])
        for t in range(baseline.horizon):
            for i, sp in enumerate(feeder.supply_points):
                w.writerow([t, format_supply_point(sp), repr(float(baseline.p_kw[t, i])),
                            repr(float(baseline.q_kvar[t, i]))])


def supply_labels(feeder: FeederModel) -> Sequence[str]:
    return [format_supply_point(sp) for sp in feeder.supply_points]


__all__ = [
    "Phase", "LineSegment", "FeederModel", "SensitivityMatrices", "BaselineSeries",
    "path_impedance", "build_sensitivity", "voltage_profile", "stack_block_diagonal",
    "feeder_from_dict", "load_feeder", "load_baseline", "write_baseline",
    "parse_supply_point", "format_supply_point", "parse_phases", "supply_labels",
]

