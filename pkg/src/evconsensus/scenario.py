"""
Scenario files and the assembled problem data.

A scenario is a JSON document that references the feeder description and
the CSV series by path (relative to the JSON file)::

    {
      "name": "medium",
      "horizon": 12, "step_hours": 1.0,
      "files": {"feeder": "feeder.json", "fleet": "fleet.csv", "price": "price.csv",
                "baseline": "baseline.csv", "disturbance": "disturbance.csv",
                "graph": "graph.csv"},          # graph is optional
      "thermal": {"capacity_J_per_K": ..., "r_heat_K_per_W": ..., "r_coil_ohm": ...,
                  "theta_eq_K": ..., "theta_a_eq_K": ..., "theta0_K": ...,
                  "v_rms_V": 240.0},
      "bases": {"power_unit_W": 1000.0},
      "limits": {"voltage_band_percent": 4.6, "theta_max_K": 393.0, "v_nominal_pu": 1.0},
      "graph": {"n_agents": 5, "edge_prob": 0.6, "seed": 3},
      "admm": {"rho": 1.0, "max_iter": 10000, "eps_dual": 1e-6, "eps_primal": 1e-6},
      "failure": {"alpha_hat": 1.0, "alpha_bar": 0.0, "seed": 0},
      "case": "network"
    }
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import coupling as cpl
from . import feeder as fdr
from . import fleet as flt
from . import thermal as thm
from .commnet import CommGraph, load_edge_list, random_connected_graph
from .errors import ConfigurationError, ContractError

CASES = ("price", "network")


@dataclass(frozen=True)
class AdmmSettings:
    rho: float = 1.0
    max_iter: int = 10000
    eps_dual: float = 1e-6
    eps_primal: float = 1e-6
    stop_window: int = 10
    proximal_form: str = "printed"
    count_stale: bool = False
    equilibrate: bool = True
    qp_tol: float = 1e-8


@dataclass(frozen=True)
class FailureSettings:
    alpha_hat: float = 1.0
    alpha_bar: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    horizon: int
    step_hours: float
    feeder: fdr.FeederModel
    fleet: tuple
    price: np.ndarray
    baseline: fdr.BaselineSeries
    disturbance: thm.DisturbanceSeries
    thermal: thm.ThermalParams
    voltage_band_percent: float
    v_nominal: float = 1.0
    power_unit: float = 1000.0
    graph: CommGraph | None = None
    graph_params: dict = field(default_factory=dict)
    admm: AdmmSettings = AdmmSettings()
    failure: FailureSettings = FailureSettings()
    case: str = "network"
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.case not in CASES:
            raise ConfigurationError(f"case must be one of {CASES}")
        T = self.horizon
        if self.price.shape != (T,):
            raise ContractError("price series does not match the horizon")
        if self.baseline.horizon != T or self.disturbance.horizon != T:
            raise ContractError("baseline / disturbance series do not match the horizon")
        if not np.isclose(self.thermal.step_hours, self.step_hours):
            raise ContractError("thermal step length differs from the scenario step")
        if len(self.fleet) != self.feeder.n_customers:
            raise ContractError("feeder customer map and fleet disagree in size")

    @property
    def n_agents(self) -> int:
        return len(self.fleet)

    def with_overrides(self, **kw) -> "ScenarioConfig":
        admm = {k: kw.pop(k) for k in list(kw) if k in AdmmSettings.__dataclass_fields__}
        fail = {k: kw.pop(k) for k in list(kw) if k in FailureSettings.__dataclass_fields__}
        out = self
        if admm:
            out = replace(out, admm=replace(out.admm, **admm))
        if fail:
            out = replace(out, failure=replace(out.failure, **fail))
        if kw:
            out = replace(out, **kw)
        return out


@dataclass(frozen=True)
class Problem:
    """Everything derived from a scenario that solvers need."""

    config: ScenarioConfig
    sens: fdr.SensitivityMatrices
    response: thm.ThermalResponse
    headroom: np.ndarray
    limits: cpl.VoltageLimits
    polytopes: tuple
    coupling: cpl.CouplingSystem
    graph: CommGraph | None          # None only for a single-customer problem
    graph_meta: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.config.horizon

    @property
    def n_agents(self) -> int:
        return self.config.n_agents

    @property
    def step_hours(self) -> float:
        return self.config.step_hours

    def objective(self, x_fleet) -> float:
        x_fleet = np.atleast_2d(x_fleet)
        return float(sum(
            flt.operational_cost(s, self.config.price, x, self.step_hours)
            for s, x in zip(self.config.fleet, x_fleet)
        ))

    def voltages(self, x_fleet) -> np.ndarray:
        """Squared voltages, shape (T, supply)."""
        v = fdr.voltage_profile(self.sens, self.config.baseline, x_fleet)
        return v.reshape(self.horizon, self.sens.n_supply)

    def temperatures(self, x_fleet) -> np.ndarray:
        cfg = self.config
        total = np.asarray(x_fleet).sum(axis=0)
        current = cfg.disturbance.i_d + thm.fleet_current(total, cfg.thermal.v_rms, cfg.power_unit)
        return thm.temperature_profile(self.response, cfg.disturbance, cfg.thermal.theta0, current)

    def soc_at_departure(self, x_fleet) -> np.ndarray:
        out = []
        for s, x in zip(self.config.fleet, np.atleast_2d(x_fleet)):
            out.append(flt.soc_profile(s, x, self.step_hours)[s.departure - 1])
        return np.array(out)


def build_problem(cfg: ScenarioConfig, check: bool = True) -> Problem:
    T, dt = cfg.horizon, cfg.step_hours
    sens = fdr.build_sensitivity(cfg.feeder)
    resp = thm.linearize(cfg.thermal, T)
    headroom = thm.thermal_headroom(
        resp, cfg.disturbance, cfg.thermal.theta0, cfg.thermal.theta_max, cfg.thermal.v_rms, cfg.power_unit
    )
    limits = cpl.VoltageLimits.from_band(cfg.voltage_band_percent, sens.n_supply, cfg.v_nominal)
    polys = tuple(flt.build_polytope(s, T, dt) for s in cfg.fleet)
    coupling = cpl.assemble(
        sens, cfg.baseline, headroom, resp.xi, limits,
        supply_labels=cpl.supply_point_labels(cfg.feeder), check=check,
    )
    graph = cfg.graph
    meta = {"generator": "file"}
    if graph is None and cfg.n_agents < 2:
        return Problem(cfg, sens, resp, headroom, limits, polys, coupling, None, {"generator": "none"})
    if graph is None:
        gp = cfg.graph_params
        graph, meta = random_connected_graph(cfg.n_agents, gp.get("edge_prob"), int(gp.get("seed", 0)))
    if graph.n_agents != cfg.n_agents:
        raise ConfigurationError("communication graph size differs from the fleet size")
    return Problem(cfg, sens, resp, headroom, limits, polys, coupling, graph, meta)


# --------------------------------------------------------------------------
# loading


def _resolve(base: Path, rel) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else base / p


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    with open(path) as fh:
        data = json.load(fh)
    return scenario_from_dict(data, path.parent)


def scenario_from_dict(data: dict[str, Any], base: Path) -> ScenarioConfig:
    files = data["files"]
    missing = [k for k, v in files.items() if not _resolve(base, v).exists()]
    if missing:
        raise ConfigurationError(f"scenario references missing files: {missing}")
    T = int(data["horizon"])
    dt = float(data["step_hours"])
    fleet = flt.load_fleet(_resolve(base, files["fleet"]))
    feeder = fdr.load_feeder(_resolve(base, files["feeder"]))
    listed = feeder.customers
    feeder = feeder.with_customers([s.supply_point for s in fleet])
    if listed and tuple(listed) != feeder.customers:
        raise ConfigurationError("feeder customer list disagrees with the fleet supply points")
    th = data["thermal"]
    limits = data["limits"]
    bases = data.get("bases", {})
    thermal = thm.ThermalParams(
        capacity=float(th["capacity_J_per_K"]),
        r_heat=float(th["r_heat_K_per_W"]),
        r_coil=float(th["r_coil_ohm"]),
        step_hours=dt,
        theta_eq=float(th["theta_eq_K"]),
        theta_a_eq=float(th["theta_a_eq_K"]),
        theta_max=float(limits["theta_max_K"]),
        theta0=float(th["theta0_K"]),
        v_rms=float(th["v_rms_V"]),
    )
    graph = None
    if "graph" in files:
        graph = load_edge_list(_resolve(base, files["graph"]), len(fleet))
    admm = AdmmSettings(**data.get("admm", {}))
    failure = FailureSettings(**data.get("failure", {}))
    return ScenarioConfig(
        name=data.get("name", "scenario"),
        horizon=T,
        step_hours=dt,
        feeder=feeder,
        fleet=tuple(fleet),
        price=flt.load_price(_resolve(base, files["price"]), T),
        baseline=fdr.load_baseline(_resolve(base, files["baseline"]), feeder, T),
        disturbance=thm.load_disturbance(_resolve(base, files["disturbance"]), T),
        thermal=thermal,
        voltage_band_percent=float(limits["voltage_band_percent"]),
        v_nominal=float(limits.get("v_nominal_pu", 1.0)),
        power_unit=float(bases.get("power_unit_W", 1000.0)),
        graph=graph,
        graph_params=dict(data.get("graph", {})),
        admm=admm,
        failure=failure,
        case=data.get("case", "network"),
        source=copy.deepcopy(data),
    )


BUNDLED = ("small", "medium", "large")


def bundled_path(name: str) -> Path:
    """Path of a bundled scenario JSON (``small``, ``medium`` or ``large``)."""
    p = Path(__file__).parent / "data" / name / "scenario.json"
    if not p.exists():
        raise ConfigurationError(f"no bundled scenario {name!r}; choose from {BUNDLED}")
    return p


def load_bundled(name: str) -> ScenarioConfig:
    return load_scenario(bundled_path(name))
