"""
Network coupling constraint ``sum_n Gamma_n x_n <= w``.

Rows are ordered: T thermal rows, then supply*T upper-voltage rows, then
supply*T lower-voltage rows.  Voltage rows are step-major (all supply
points of step 0 first).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ContractError, ScenarioInfeasibleError
from .feeder import BaselineSeries, SensitivityMatrices, format_supply_point, stack_block_diagonal


@dataclass(frozen=True)
class VoltageLimits:
    """Squared voltage bounds per supply point (p.u.^2)."""

    v_min: np.ndarray
    v_max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.v_min, dtype=float).reshape(-1)
        hi = np.asarray(self.v_max, dtype=float).reshape(-1)
        if lo.shape != hi.shape or not np.all((0 < lo) & (lo < hi)):
            raise ContractError("voltage limits need 0 < v_min < v_max elementwise")
        object.__setattr__(self, "v_min", lo)
        object.__setattr__(self, "v_max", hi)

    @classmethod
    def from_band(cls, percent: float, n_supply: int, v_nominal: float = 1.0) -> "VoltageLimits":
        """Band of +/- ``percent`` around the nominal magnitude, squared."""
        p = percent / 100.0
        return cls(
            np.full(n_supply, ((1 - p) * v_nominal) ** 2),
            np.full(n_supply, ((1 + p) * v_nominal) ** 2),
        )


class Violation(NamedTuple):
    kind: str          # "thermal", "upper_voltage" or "lower_voltage"
    location: str      # supply point label or "thermal"
    t: int
    slack: float


@dataclass(frozen=True)
class CouplingSystem:
    gammas: tuple          # per-customer (m, T) maps
    w: np.ndarray
    horizon: int
    n_supply: int
    supply_labels: tuple

    @property
    def n_rows(self) -> int:
        return self.w.shape[0]

    @property
    def n_agents(self) -> int:
        return len(self.gammas)

    def load(self, x_fleet) -> np.ndarray:
        """sum_n Gamma_n x_n for an N x T schedule."""
        x_fleet = np.atleast_2d(np.asarray(x_fleet, dtype=float))
        if x_fleet.shape != (self.n_agents, self.horizon):
            raise ContractError(f"schedule shape {x_fleet.shape} != {(self.n_agents, self.horizon)}")
        out = np.zeros(self.n_rows)
        for g, x in zip(self.gammas, x_fleet):
            out += g @ x
        return out

    def slack(self, x_fleet) -> np.ndarray:
        return self.w - self.load(x_fleet)

    def row_info(self, row: int) -> tuple[str, str, int]:
        T, k = self.horizon, self.n_supply
        if row < T:
            return "thermal", "thermal", row
        row -= T
        kind = "upper_voltage" if row < k * T else "lower_voltage"
        row %= k * T
        return kind, self.supply_labels[row % k], row // k


def assemble(
    sens: SensitivityMatrices,
    baseline: BaselineSeries,
    headroom: np.ndarray,
    xi: np.ndarray,
    limits: VoltageLimits,
    supply_labels: Sequence[str] | None = None,
    check: bool = True,
) -> CouplingSystem:
    """Stack thermal and voltage constraints for every customer.

    Parameters
    ----------
    sens : SensitivityMatrices
        Gives D (one column per customer).
    baseline : BaselineSeries
        Non-EV load; determines the baseline squared voltages.
    headroom : ndarray
        Thermal headroom J (length T), already in EV power units.
    xi : ndarray
        T x T thermal response to EV power.
    limits : VoltageLimits
    check : bool
        Raise :class:`ScenarioInfeasibleError` when the limits are already
        violated with zero EV load.
    """
    T = baseline.horizon
    k = sens.n_supply
    headroom = np.asarray(headroom, dtype=float).reshape(-1)
    if headroom.shape != (T,) or xi.shape != (T, T):
        raise ContractError("thermal headroom / response do not match the horizon")
    if limits.v_min.shape != (k,):
        raise ContractError("voltage limits do not match the supply points")
    v_tilde = baseline.voltages(sens)
    v_hi = np.tile(limits.v_max, T)
    v_lo = np.tile(limits.v_min, T)
    w = np.concatenate([headroom, v_hi - v_tilde, -v_lo + v_tilde])
    gammas = []
    for n in range(sens.D.shape[1]):
        dbar = stack_block_diagonal(sens.D[:, n], T)
        g = np.vstack([xi, dbar, -dbar])
        g.setflags(write=False)
        gammas.append(g)
    w.setflags(write=False)
    labels = tuple(supply_labels) if supply_labels is not None else tuple(str(i) for i in range(k))
    system = CouplingSystem(gammas=tuple(gammas), w=w, horizon=T, n_supply=k, supply_labels=labels)
    if check:
        bad = [
            Violation(*system.row_info(r), float(w[r]))
            for r in np.flatnonzero(w < 0)
        ]
        if bad:
            raise ScenarioInfeasibleError(
                f"{len(bad)} network limits violated with zero EV load", violations=bad
            )
    return system


def equilibrate(system: CouplingSystem) -> tuple[CouplingSystem, np.ndarray]:
    """Rescale every row so its largest coefficient over all customers is 1.

    The feasible set is unchanged.  Thermal rows carry O(1) coefficients
    while voltage rows carry p.u.^2/kW sensitivities several hundred times
    smaller; without rescaling one penalty cannot suit both.  Returns the
    scaled system and the row factors ``d`` (scaled row = d * row).
    """
    peak = np.zeros(system.n_rows)
    for g in system.gammas:
        peak = np.maximum(peak, np.max(np.abs(g), axis=1, initial=0.0))
    d = np.where(peak > 0, 1.0 / np.where(peak > 0, peak, 1.0), 1.0)
    gammas = []
    for g in system.gammas:
        gs = d[:, None] * g
        gs.setflags(write=False)
        gammas.append(gs)
    w = d * system.w
    w.setflags(write=False)
    scaled = CouplingSystem(tuple(gammas), w, system.horizon, system.n_supply, system.supply_labels)
    return scaled, d


def without_network(system: CouplingSystem) -> CouplingSystem:
    """The same customers with no coupling rows (price-only operation)."""
    T = system.horizon
    empty = np.zeros(0)
    empty.setflags(write=False)
    return CouplingSystem(
        tuple(np.zeros((0, T)) for _ in system.gammas), empty, T, system.n_supply, system.supply_labels
    )


def violation_report(coupling: CouplingSystem, x_fleet, tol: float = 0.0) -> list[Violation]:
    """Rows whose slack ``w - sum Gamma x`` is below ``-tol``."""
    s = coupling.slack(x_fleet)
    return [Violation(*coupling.row_info(r), float(s[r])) for r in np.flatnonzero(s < -tol)]


def supply_point_labels(feeder) -> tuple:
    return tuple(format_supply_point(sp) for sp in feeder.supply_points)
