import functools

import numpy as np
import pytest

from evconsensus import feeder as fdr
from evconsensus import fleet as flt
from evconsensus import runner as rn
from evconsensus import scenario as sc
from evconsensus import thermal as thm


def thermal_params(step_hours=1.0, i_eq=400.0, theta_max=393.0, theta0=353.0):
    """5 h time constant around 353 K / 293 K; ``i_eq`` sets the coil resistance."""
    r_heat = 0.05
    return thm.ThermalParams(
        capacity=5.0 * 3600.0 / r_heat, r_heat=r_heat, r_coil=60.0 / (r_heat * i_eq**2),
        step_hours=step_hours, theta_eq=353.0, theta_a_eq=293.0, theta_max=theta_max,
        theta0=theta0, v_rms=240.0,
    )


def one_bus_feeder(r=0.01, x=0.005, phases="a"):
    ph = fdr.parse_phases(phases)
    imp = {(p, p): complex(r, x) for p in ph}
    return fdr.FeederModel((fdr.LineSegment(0, 1, ph, imp),), s_base_kva=100.0, v_base_kv=0.24)


def ev(ev_id="ev", sp="1:a", arrival=0, departure=4, capacity=10.0, soc0=0.2, target=0.6,
       soc_min=0.0, soc_max=1.0, eff=1.0, x_min=0.0, x_max=5.0, kappa=0.01):
    return flt.EvSpec(ev_id, sp, arrival, departure, capacity, soc0, target, soc_min, soc_max,
                      eff, x_min, x_max, kappa)


def make_config(fleet, horizon, step_hours=1.0, price=None, feeder=None, base_kw=0.0, band=4.6,
                i_eq=400.0, theta_max=393.0, graph=None, edge_prob=1.0, case="network", **admm):
    """In-memory scenario on a one-bus feeder with a calm transformer by default."""
    feeder = (feeder or one_bus_feeder()).with_customers([s.supply_point for s in fleet])
    T = horizon
    price = np.full(T, 0.2) if price is None else np.asarray(price, dtype=float)
    p = np.full((T, feeder.n_supply), float(base_kw))
    baseline = fdr.BaselineSeries(p, 0.3 * p)
    dist = thm.DisturbanceSeries(np.full(T, 293.0), np.zeros(T))
    return sc.ScenarioConfig(
        name="inline", horizon=T, step_hours=step_hours, feeder=feeder, fleet=tuple(fleet),
        price=price, baseline=baseline, disturbance=dist,
        thermal=thermal_params(step_hours, i_eq=i_eq, theta_max=theta_max),
        voltage_band_percent=band, graph=graph, graph_params={"edge_prob": edge_prob, "seed": 0},
        admm=sc.AdmmSettings(**admm), case=case,
    )


@functools.lru_cache(maxsize=None)
def bundled_problem(name):
    return sc.build_problem(sc.load_bundled(name))


@functools.lru_cache(maxsize=None)
def bundled_oracle(name, case="network"):
    return rn.solve_centralized(bundled_problem(name), case)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
