"""
Synthetic scenario generation.

Builds self-consistent scenarios (feeder, fleet, ToU prices, residential
baseline with rooftop PV, ambient temperature) and writes them in the
scenario file layout.  The bundled scenarios under ``data/`` were produced
with :func:`write_bundled`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import feeder as fdr
from . import fleet as flt
from . import thermal as thm
from .commnet import random_connected_graph

# ToU windows by hour of day: off-peak 22-7, shoulder 7-14 and 20-22, peak 14-20
TOU_PRICES = {"off_peak": 0.08, "shoulder": 0.20, "peak": 0.45}


def tou_window(hour: float) -> str:
    h = hour % 24.0
    if h >= 22.0 or h < 7.0:
        return "off_peak"
    if 14.0 <= h < 20.0:
        return "peak"
    return "shoulder"


def tou_prices(horizon: int, step_hours: float, start_hour: float, prices=None) -> np.ndarray:
    prices = prices or TOU_PRICES
    return np.array([prices[tou_window(start_hour + (t + 0.5) * step_hours)] for t in range(horizon)])


def residential_load(hours: np.ndarray, peak_kw: float, pv_kw: float) -> np.ndarray:
    """Evening-peaked household load minus a midday PV bell."""
    h = hours % 24.0
    load = 0.35 + 0.25 * np.exp(-((h - 8.0) / 1.5) ** 2) + 0.65 * np.exp(-((h - 19.0) / 2.5) ** 2)
    pv = np.clip(np.cos((h - 12.5) / 12.0 * 2.0 * math.pi * 1.0), 0.0, None) ** 3
    pv[(h < 6.5) | (h > 18.5)] = 0.0
    return peak_kw * load - pv_kw * pv


@dataclass(frozen=True)
class FeederLayout:
    """Lines as (from, to, phases, self r ohm, self x ohm)."""

    lines: tuple
    mutual_fraction: float = 0.3

    def build(self, v0: float, s_base_kva: float, v_base_kv: float) -> fdr.FeederModel:
        segs = []
        for frm, to, phases, r, x in self.lines:
            ph = fdr.parse_phases(phases)
            imp = {}
            for i, p in enumerate(ph):
                imp[(p, p)] = complex(r, x)
                for q in ph[i + 1:]:
                    imp[(p, q)] = complex(r, x) * self.mutual_fraction
            segs.append(fdr.LineSegment(frm, to, ph, imp))
        return fdr.FeederModel(tuple(segs), v0=v0, s_base_kva=s_base_kva, v_base_kv=v_base_kv)

    def to_json(self, v0: float, s_base_kva: float, v_base_kv: float) -> dict:
        lines = []
        nodes = [{"id": 0, "phases": "abc"}]
        for frm, to, phases, r, x in self.lines:
            ph = fdr.parse_phases(phases)
            imp = {}
            for i, p in enumerate(ph):
                imp[p.name * 2] = [r, x]
                for q in ph[i + 1:]:
                    imp[p.name + q.name] = [r * self.mutual_fraction, x * self.mutual_fraction]
            lines.append({"from": frm, "to": to, "phases": "".join(p.name for p in ph), "impedance_ohm": imp})
            nodes.append({"id": to, "phases": "".join(p.name for p in ph)})
        return {"bases": {"s_base_kva": s_base_kva, "v_base_kv": v_base_kv}, "v0": v0,
                "nodes": nodes, "lines": lines}


@dataclass(frozen=True)
class SyntheticSpec:
    name: str
    n_ev: int
    horizon: int
    step_hours: float
    start_hour: float
    layout: FeederLayout
    households_per_supply: float
    household_peak_kw: float
    pv_kw: float
    ev_rate_kw: float
    v2g_fraction: float
    i_eq_A: float
    v_rms: float = 240.0
    v0: float = 1.0
    s_base_kva: float = 100.0
    v_base_kv: float = 0.24
    theta_max: float = 393.0
    band_percent: float = 4.6
    rho: float = 1.0
    edge_prob: float | None = None
    seed: int = 0


def generate(spec: SyntheticSpec):
    """Return the files of a synthetic scenario as in-memory objects."""
    rng = np.random.default_rng(spec.seed)
    T, dt = spec.horizon, spec.step_hours
    feeder = spec.layout.build(spec.v0, spec.s_base_kva, spec.v_base_kv)
    sps = feeder.supply_points
    hours = spec.start_hour + (np.arange(T) + 0.5) * dt

    p = np.zeros((T, len(sps)))
    for i in range(len(sps)):
        scale = spec.households_per_supply * rng.uniform(0.8, 1.2)
        p[:, i] = scale * residential_load(hours, spec.household_peak_kw, spec.pv_kw * rng.uniform(0.7, 1.3))
    q = 0.3 * np.clip(p, 0.0, None)
    baseline = fdr.BaselineSeries(p, q)

    fleet = []
    # EVs are spread over the downstream supply points first
    order = sorted(range(len(sps)), key=lambda i: (-sps[i][0], i))
    for n in range(spec.n_ev):
        sp = sps[order[n % len(order)]]
        win = max(2, int(round(rng.uniform(0.55, 0.85) * T)))
        arrival = int(rng.integers(0, max(1, T - win) + 1))
        departure = min(T, arrival + win)
        cap = float(rng.choice([40.0, 50.0, 60.0]))
        soc0 = round(float(rng.uniform(0.2, 0.45)), 3)
        rate = spec.ev_rate_kw
        eff = round(float(rng.uniform(0.88, 0.95)), 3)
        plugged = departure - arrival
        # keep the demand reachable at ~60% of the rate limit
        max_gain = 0.6 * rate * plugged * dt * eff / cap
        target = round(min(0.9, soc0 + max_gain, soc0 + float(rng.uniform(0.3, 0.5))), 3)
        x_min = -rate if rng.random() < spec.v2g_fraction else 0.0
        fleet.append(flt.EvSpec(
            ev_id=f"ev{n:02d}", supply_point=sp, arrival=arrival, departure=departure,
            capacity=cap, soc0=soc0, soc_target=target, soc_min=0.1, soc_max=0.95,
            efficiency=eff, x_min=x_min, x_max=rate, kappa=round(float(rng.uniform(0.005, 0.02)), 4),
        ))

    price = tou_prices(T, dt, spec.start_hour)
    theta_a = 293.0 + 5.0 * np.sin((hours - 9.0) / 24.0 * 2.0 * math.pi)
    i_d = p.sum(axis=1) * 1000.0 / spec.v_rms
    dist = thm.DisturbanceSeries(theta_a, i_d)

    # single thermal mass: tau = R*C = 5 h, R_heat*R_c sets the equilibrium current
    theta_eq, theta_a_eq = 353.0, 293.0
    r_heat = 0.05
    capacity = 5.0 * 3600.0 / r_heat
    r_coil = (theta_eq - theta_a_eq) / (r_heat * spec.i_eq_A**2)
    thermal = {
        "capacity_J_per_K": capacity, "r_heat_K_per_W": r_heat, "r_coil_ohm": r_coil,
        "theta_eq_K": theta_eq, "theta_a_eq_K": theta_a_eq, "theta0_K": theta_eq,
        "v_rms_V": spec.v_rms,
    }
    graph, meta = random_connected_graph(spec.n_ev, spec.edge_prob, seed=spec.seed)
    return {
        "feeder_json": spec.layout.to_json(spec.v0, spec.s_base_kva, spec.v_base_kv),
        "feeder": feeder,
        "fleet": fleet,
        "price": price,
        "baseline": baseline,
        "disturbance": dist,
        "thermal": thermal,
        "graph": graph,
        "graph_meta": meta,
    }


def write_scenario(spec: SyntheticSpec, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    data = generate(spec)
    with open(out / "feeder.json", "w") as fh:
        json.dump(data["feeder_json"], fh, indent=2)
    flt.write_fleet(out / "fleet.csv", data["fleet"])
    flt.write_price(out / "price.csv", data["price"])
    fdr.write_baseline(out / "baseline.csv", data["feeder"], data["baseline"])
    thm.write_disturbance(out / "disturbance.csv", data["disturbance"])
    with open(out / "graph.csv", "w") as fh:
        fh.write("source,target\n")
        for n, m in data["graph"].edges:
            fh.write(f"{n},{m}\n")
    scenario = {
        "name": spec.name,
        "horizon": spec.horizon,
        "step_hours": spec.step_hours,
        "start_hour": spec.start_hour,
        "files": {"feeder": "feeder.json", "fleet": "fleet.csv", "price": "price.csv",
                  "baseline": "baseline.csv", "disturbance": "disturbance.csv", "graph": "graph.csv"},
        "thermal": data["thermal"],
        "bases": {"power_unit_W": 1000.0},
        "limits": {"voltage_band_percent": spec.band_percent, "theta_max_K": spec.theta_max,
                   "v_nominal_pu": 1.0},
        "graph": {"n_agents": spec.n_ev, **data["graph_meta"]},
        "admm": {"rho": spec.rho, "max_iter": 10000, "eps_dual": 1e-6, "eps_primal": 1e-6},
        "failure": {"alpha_hat": 1.0, "alpha_bar": 0.0, "seed": 0},
        "case": "network",
    }
    with open(out / "scenario.json", "w") as fh:
        json.dump(scenario, fh, indent=2)
    return out / "scenario.json"


SMALL_FEEDER = FeederLayout(((0, 1, "abc", 0.03, 0.02), (1, 2, "a", 0.05, 0.03)))
MEDIUM_FEEDER = FeederLayout(((0, 1, "abc", 0.03, 0.02), (1, 2, "ab", 0.05, 0.03), (1, 3, "c", 0.05, 0.03)))
LARGE_FEEDER = FeederLayout((
    (0, 1, "abc", 0.04, 0.03), (1, 2, "abc", 0.06, 0.04), (2, 3, "ab", 0.10, 0.06), (2, 4, "c", 0.10, 0.06),
))

# equilibrium currents are set so the thermal limit binds without making
# the network-aware problem infeasible; the large feeder is also long
# enough that off-peak charging pulls voltages below the band
BUNDLED_SPECS = {
    "small": SyntheticSpec("small", 2, 8, 1.0, 17.0, SMALL_FEEDER, 3, 1.5, 0.0, 7.0, 0.5, 47.0,
                           edge_prob=1.0, seed=1),
    "medium": SyntheticSpec("medium", 5, 12, 1.0, 16.0, MEDIUM_FEEDER, 3, 1.5, 0.0, 7.0, 0.4, 88.0,
                            edge_prob=0.6, seed=2),
    "large": SyntheticSpec("large", 20, 48, 0.5, 12.0, LARGE_FEEDER, 4, 1.5, 2.0, 7.0, 0.3, 180.0,
                           rho=10.0, seed=3),
}


def write_bundled(root) -> list[Path]:
    """Regenerate the bundled scenarios under ``root/<name>/``."""
    return [write_scenario(spec, Path(root) / name) for name, spec in BUNDLED_SPECS.items()]
