"""
Per-EV battery model: SoC dynamics, feasible charge profiles and cost.

Time steps are indexed 0..T-1 in arrays.  An EV with arrival index ``a``
and departure index ``d`` is plugged in for array slots ``a <= t < d``
(steps a+1..d in one-based numbering).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InfeasibleSpecError, ModelError
from .feeder import format_supply_point, parse_supply_point


@dataclass(frozen=True)
class EvSpec:
    ev_id: str
    supply_point: tuple
    arrival: int
    departure: int
    capacity: float
    soc0: float
    soc_target: float
    soc_min: float
    soc_max: float
    efficiency: float
    x_min: float
    x_max: float
    kappa: float

    def __post_init__(self):
        object.__setattr__(self, "supply_point", parse_supply_point(self.supply_point))
        if not self.arrival < self.departure:
            raise ModelError(f"EV {self.ev_id}: arrival {self.arrival} not before departure {self.departure}")
        if not 0.0 <= self.soc_min <= self.soc0 <= self.soc_max <= 1.0:
            raise ModelError(f"EV {self.ev_id}: need 0 <= soc_min <= soc0 <= soc_max <= 1")
        if not 0.0 < self.efficiency <= 1.0:
            raise ModelError(f"EV {self.ev_id}: efficiency must lie in (0, 1]")
        if not self.x_min <= 0.0 <= self.x_max:
            raise ModelError(f"EV {self.ev_id}: need x_min <= 0 <= x_max")
        if self.kappa <= 0.0:
            raise ModelError(f"EV {self.ev_id}: kappa must be positive")
        if self.capacity <= 0.0:
            raise ModelError(f"EV {self.ev_id}: capacity must be positive")

    @property
    def energy_demand(self) -> float:
        """e_n = (soc_target - soc0) * capacity [kWh]."""
        return (self.soc_target - self.soc0) * self.capacity

    def availability(self, horizon: int) -> np.ndarray:
        mask = np.zeros(horizon, dtype=bool)
        mask[self.arrival:self.departure] = True
        return mask

    def soc_gain(self, step_hours: float) -> float:
        return self.efficiency * step_hours / self.capacity

    def cumulative_bounds(self, step_hours: float) -> tuple[float, float]:
        g = self.soc_gain(step_hours)
        return (self.soc_min - self.soc0) / g, (self.soc_max - self.soc0) / g

    def total_charge(self, step_hours: float) -> float:
        """Required sum of the charge profile so that SoC hits the target."""
        return (self.soc_target - self.soc0) / self.soc_gain(step_hours)


def soc_profile(spec: EvSpec, x, step_hours: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return spec.soc0 + spec.soc_gain(step_hours) * np.cumsum(x)


def cumulative_matrix(horizon: int) -> np.ndarray:
    return np.tril(np.ones((horizon, horizon)))


@dataclass(frozen=True)
class BatteryPolytope:
    """{x : A_ineq x >= b_ineq, A_eq x = b_eq} for one EV.

    ``window`` holds the array slots where the EV is plugged in.  The
    ``reduced_*`` fields describe the same set over those slots only as
    ``lo <= B x_w <= hi`` with redundant rows removed.
    """

    A_ineq: np.ndarray
    b_ineq: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    availability: np.ndarray
    window: np.ndarray
    reduced_B: np.ndarray
    reduced_lo: np.ndarray
    reduced_hi: np.ndarray

    @property
    def horizon(self) -> int:
        return self.A_ineq.shape[1]

    @property
    def n_free(self) -> int:
        return self.window.shape[0]

    def contains(self, x, tol: float = 1e-9) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(
            np.all(self.A_ineq @ x >= self.b_ineq - tol)
            and np.all(np.abs(self.A_eq @ x - self.b_eq) <= tol)
        )

    def expand(self, x_window) -> np.ndarray:
        x = np.zeros(self.horizon)
        x[self.window] = x_window
        return x


def build_polytope(spec: EvSpec, horizon: int, step_hours: float) -> BatteryPolytope:
    """Stack rate, SoC, demand and availability constraints.

    Raises
    ------
    InfeasibleSpecError
        If no profile satisfies all constraints; ``constraint`` names the
        violated one.
    """
    T = horizon
    if spec.departure > T or spec.arrival < 0:
        raise ModelError(f"EV {spec.ev_id}: plug-in window [{spec.arrival}, {spec.departure}) leaves horizon {T}")
    if not spec.soc_min <= spec.soc_target <= spec.soc_max:
        raise InfeasibleSpecError(
            f"EV {spec.ev_id}: target SoC {spec.soc_target} outside [{spec.soc_min}, {spec.soc_max}]",
            constraint="soc_target",
        )
    c_lo, c_hi = spec.cumulative_bounds(step_hours)
    total = spec.total_charge(step_hours)
    avail = spec.availability(T)

    # interval reachability of the cumulative charge along the window
    lo = hi = 0.0
    for _ in range(int(avail.sum())):
        lo, hi = max(lo + spec.x_min, c_lo), min(hi + spec.x_max, c_hi)
    if total > hi + 1e-12:
        raise InfeasibleSpecError(
            f"EV {spec.ev_id}: demand {total:.6g} kW*steps exceeds reachable {hi:.6g} "
            f"within {int(avail.sum())} plugged-in steps",
            constraint="energy_demand",
        )
    if total < lo - 1e-12:
        raise InfeasibleSpecError(
            f"EV {spec.ev_id}: target requires discharging beyond reachable {lo:.6g}",
            constraint="energy_demand",
        )

    eye = np.eye(T)
    tri = cumulative_matrix(T)
    A_ineq = np.vstack([eye, -eye, tri, -tri])
    b_ineq = np.concatenate([
        np.full(T, spec.x_min), np.full(T, -spec.x_max), np.full(T, c_lo), np.full(T, -c_hi)
    ])
    A_eq = np.vstack([np.ones((1, T)), np.diag((~avail).astype(float))])
    b_eq = np.concatenate([[total], np.zeros(T)])

    window = np.flatnonzero(avail)
    L = window.shape[0]
    # rate rows, then cumulative rows 2..L-1, then the total; the first
    # cumulative row coincides with the first rate row and the last with
    # the total, so they are merged instead of repeated
    rows = [np.eye(L)]
    lo_r = [np.full(L, spec.x_min)]
    hi_r = [np.full(L, spec.x_max)]
    lo_r[0][0] = max(lo_r[0][0], c_lo)
    hi_r[0][0] = min(hi_r[0][0], c_hi)
    if L > 2:
        rows.append(cumulative_matrix(L)[1:L - 1])
        lo_r.append(np.full(L - 2, c_lo))
        hi_r.append(np.full(L - 2, c_hi))
    rows.append(np.ones((1, L)))
    lo_r.append(np.array([total]))
    hi_r.append(np.array([total]))
    B = np.vstack(rows)
    lo_v = np.concatenate(lo_r)
    hi_v = np.concatenate(hi_r)
    for arr in (A_ineq, b_ineq, A_eq, b_eq, avail, window, B, lo_v, hi_v):
        arr.setflags(write=False)
    return BatteryPolytope(
        A_ineq=A_ineq, b_ineq=b_ineq, A_eq=A_eq, b_eq=b_eq, availability=avail,
        window=window, reduced_B=B, reduced_lo=lo_v, reduced_hi=hi_v,
    )


def operational_cost(spec: EvSpec, price, x, step_hours: float) -> float:
    """Energy bill under net metering plus quadratic degradation proxy [$]."""
    price = np.asarray(price, dtype=float)
    x = np.asarray(x, dtype=float)
    if price.shape != x.shape:
        raise ContractError(f"price length {price.shape} does not match profile {x.shape}")
    return float(np.sum(step_hours * price * x + spec.kappa * x * x))


def cost_gradient(spec: EvSpec, price, x, step_hours: float) -> np.ndarray:
    return step_hours * np.asarray(price, dtype=float) + 2.0 * spec.kappa * np.asarray(x, dtype=float)


# --------------------------------------------------------------------------
# file formats

FLEET_COLUMNS = [
    "ev_id", "supply_point", "arrival_idx", "departure_idx", "capacity_kwh", "soc0",
    "soc_target", "soc_min", "soc_max", "eff", "x_min_kw", "x_max_kw", "kappa",
]


def load_fleet(path) -> list[EvSpec]:
    specs = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            specs.append(EvSpec(
                ev_id=row["ev_id"],
                supply_point=parse_supply_point(row["supply_point"]),
                arrival=int(row["arrival_idx"]),
                departure=int(row["departure_idx"]),
                capacity=float(row["capacity_kwh"]),
                soc0=float(row["soc0"]),
                soc_target=float(row["soc_target"]),
                soc_min=float(row["soc_min"]),
                soc_max=float(row["soc_max"]),
                efficiency=float(row["eff"]),
                x_min=float(row["x_min_kw"]),
                x_max=float(row["x_max_kw"]),
                kappa=float(row["kappa"]),
            ))
    return specs


def write_fleet(path, specs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FLEET_COLUMNS)
        for s in specs:
            w.writerow([
                s.ev_id, format_supply_point(s.supply_point), s.arrival, s.departure, s.capacity,
                s.soc0, s.soc_target, s.soc_min, s.soc_max, s.efficiency, s.x_min, s.x_max, s.kappa,
            ])


def load_price(path, horizon: int) -> np.ndarray:
    price = np.full(horizon, np.nan)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            t = int(row["time_index"])
            if not 0 <= t < horizon:
                raise ContractError(f"price time_index {t} outside horizon {horizon}")
            price[t] = float(row["price_per_kwh"])
    if np.isnan(price).any():
        raise ContractError("price file does not cover every step")
    return price


def write_price(path, price) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_index", "price_per_kwh"])
        for t, p in enumerate(price):
            w.writerow([t, repr(float(p))])
