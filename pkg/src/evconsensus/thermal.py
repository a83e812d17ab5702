"""
Feeder-head transformer as a single thermal mass.

The core temperature follows

    theta(t+1) = rho*theta(t) + rho_hat*i(t)**2 + rho_bar*theta_a(t)

which is linearized around the equilibrium (theta_eq, i_eq) to

    theta(t+1) = rho*theta(t) + rho_tilde*i(t) + rho_bar*theta_a(t) + beta

and stacked over a horizon of T steps.  Entry ``t`` of the current and
ambient vectors acts during step ``t`` and drives the temperature at the
end of that step, so ``theta[t]`` is theta(t+1).
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (
    ContractError,
    ImaginaryEquilibriumError,
    InfeasibleBaselineWarning,
    UnstableDiscretizationError,
)


@dataclass(frozen=True)
class ThermalParams:
    """Transformer constants.

    Attributes
    ----------
    capacity : float
        Heat capacity C [J/K].
    r_heat : float
        Heat outflow resistance [K/W].
    r_coil : float
        Coil resistance [ohm].
    step_hours : float
        Step length; converted to seconds internally.
    theta_eq, theta_a_eq : float
        Equilibrium core and ambient temperatures [K].
    theta_max : float
        Absolute upper bound on core temperature [K].
    theta0 : float
        Core temperature at the start of the horizon [K].
    v_rms : float
        Rms grid voltage [V] converting EV power into current.
    """

    capacity: float
    r_heat: float
    r_coil: float
    step_hours: float
    theta_eq: float
    theta_a_eq: float
    theta_max: float
    theta0: float
    v_rms: float

    @property
    def step_seconds(self) -> float:
        return self.step_hours * 3600.0


@dataclass(frozen=True)
class ThermalResponse:
    rho: float
    rho_hat: float
    rho_bar: float
    rho_tilde: float
    i_eq: float
    beta: float
    rho_vec: np.ndarray
    xi: np.ndarray
    rho_bar_mat: np.ndarray
    geo: np.ndarray

    @property
    def horizon(self) -> int:
        return self.rho_vec.shape[0]


@dataclass(frozen=True)
class DisturbanceSeries:
    theta_a: np.ndarray
    i_d: np.ndarray

    def __post_init__(self):
        ta = np.asarray(self.theta_a, dtype=float).reshape(-1)
        idd = np.asarray(self.i_d, dtype=float).reshape(-1)
        if ta.shape != idd.shape:
            raise ContractError("ambient and non-EV current series differ in length")
        object.__setattr__(self, "theta_a", ta)
        object.__setattr__(self, "i_d", idd)

    @property
    def horizon(self) -> int:
        return self.theta_a.shape[0]


def _powers(rho: float, horizon: int) -> np.ndarray:
    """[1, rho, ..., rho**(T-1)] by repeated multiplication."""
    out = np.empty(horizon)
    acc = 1.0
    for t in range(horizon):
        out[t] = acc
        acc *= rho
    return out


def _toeplitz_lower(first_col: np.ndarray) -> np.ndarray:
    T = first_col.shape[0]
    idx = np.arange(T)
    lag = idx[:, None] - idx[None, :]
    mat = np.where(lag >= 0, first_col[np.clip(lag, 0, None)], 0.0)
    return mat


def linearize(params: ThermalParams, horizon: int) -> ThermalResponse:
    dt = params.step_seconds
    rho_bar = dt / (params.r_heat * params.capacity)
    rho = 1.0 - rho_bar
    if not 0.0 < rho < 1.0:
        raise UnstableDiscretizationError(
            f"decay factor {rho:.6g} outside (0, 1); shorten the step or enlarge R*C"
        )
    rho_hat = dt * params.r_coil / params.capacity
    if params.theta_eq <= params.theta_a_eq:
        raise ImaginaryEquilibriumError(
            "equilibrium core temperature must exceed equilibrium ambient temperature"
        )
    i_eq = math.sqrt(rho_bar * (params.theta_eq - params.theta_a_eq) / rho_hat)
    rho_tilde = 2.0 * rho_hat * i_eq
    beta = (1.0 - rho) * params.theta_eq - rho_tilde * i_eq - rho_bar * params.theta_a_eq
    pw = _powers(rho, horizon + 1)
    xi = _toeplitz_lower(rho_tilde * pw[:horizon])
    rho_bar_mat = _toeplitz_lower(rho_bar * pw[:horizon])
    geo = np.cumsum(pw[:horizon])
    for arr in (xi, rho_bar_mat, geo):
        arr.setflags(write=False)
    rho_vec = pw[1:].copy()
    rho_vec.setflags(write=False)
    return ThermalResponse(
        rho=rho, rho_hat=rho_hat, rho_bar=rho_bar, rho_tilde=rho_tilde, i_eq=i_eq,
        beta=beta, rho_vec=rho_vec, xi=xi, rho_bar_mat=rho_bar_mat, geo=geo,
    )


def _check(resp: ThermalResponse, *vecs):
    for v in vecs:
        if v.shape != (resp.horizon,):
            raise ContractError(f"expected length {resp.horizon}, got shape {v.shape}")


def temperature_profile(resp: ThermalResponse, dist: DisturbanceSeries, theta0: float, current) -> np.ndarray:
    """Core temperature at the end of each step for total current ``current`` [A]."""
    i = np.asarray(current, dtype=float).reshape(-1)
    _check(resp, i, dist.theta_a)
    return resp.rho_vec * theta0 + resp.xi @ i + resp.rho_bar_mat @ dist.theta_a + resp.beta * resp.geo


def fleet_current(x_total_kw, v_rms: float, power_unit: float = 1000.0) -> np.ndarray:
    """Current drawn by an aggregate EV schedule given in power units."""
    return np.asarray(x_total_kw, dtype=float) * power_unit / v_rms


def thermal_headroom(
    resp: ThermalResponse,
    dist: DisturbanceSeries,
    theta0: float,
    theta_max: float,
    v_rms: float,
    power_unit: float = 1000.0,
) -> np.ndarray:
    """Right-hand side of ``sum_n Xi x_n <= J`` with x_n in power units.

    Warns with :class:`InfeasibleBaselineWarning` when the bound is already
    exceeded with no EV load.
    """
    _check(resp, dist.theta_a, dist.i_d)
    base = (
        theta_max
        - resp.rho_vec * theta0
        - resp.rho_bar_mat @ dist.theta_a
        - resp.beta * resp.geo
        - resp.xi @ dist.i_d
    )
    headroom = (v_rms / power_unit) * base
    bad = np.flatnonzero(headroom < 0)
    if bad.size:
        warnings.warn(
            f"transformer exceeds its bound with zero EV load at steps {bad.tolist()}",
            InfeasibleBaselineWarning,
            stacklevel=2,
        )
    return headroom


def load_disturbance(path, horizon: int) -> DisturbanceSeries:
    """Read ``time_index, theta_a_K, i_d_A`` rows; every step must be present."""
    ta = np.full(horizon, np.nan)
    idd = np.full(horizon, np.nan)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            t = int(row["time_index"])
            if not 0 <= t < horizon:
                raise ContractError(f"disturbance time_index {t} outside horizon {horizon}")
            ta[t] = float(row["theta_a_K"])
            idd[t] = float(row["i_d_A"])
    if np.isnan(ta).any():
        raise ContractError("disturbance file does not cover every step")
    return DisturbanceSeries(ta, idd)


def write_disturbance(path, dist: DisturbanceSeries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_index", "theta_a_K", "i_d_A"])
        for t in range(dist.horizon):
            w.writerow([t, repr(float(dist.theta_a[t])), repr(float(dist.i_d[t]))])
