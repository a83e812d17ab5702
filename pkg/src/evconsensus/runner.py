"""
Orchestration: centralized oracle, distributed runs, case study, outputs.

The orchestrator drives synchronous rounds.  Each round it samples the
active agents and links, delivers the last broadcast duals over the live
links, lets active agents update (optionally on a thread pool) and freezes
the rest.  It then measures the fleet objective, the relative gap to the
oracle, the largest dual disagreement across edges and the coupling
residual.  Measurement is an observer channel; agents never see it.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import platform
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import coupling as cpl
from . import fleet as flt
from . import localqp
from .agent import Agent
from .commnet import FailureModel, MessageBus, sample_round
from .errors import ConfigurationError, ConvergenceWarning, ScenarioInfeasibleError
from .qp import QPInfeasibleError, solve_qp
from .scenario import AdmmSettings, FailureSettings, Problem

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("iteration", "objective", "error", "dual_gap", "primal_residual", "n_active")


# --------------------------------------------------------------------------
# centralized oracle


@dataclass(frozen=True)
class CentralizedSolution:
    x_fleet: np.ndarray
    objective: float
    duals: np.ndarray        # coupling multipliers (original row units); empty for the price case
    iterations: int
    case: str


def _case_of(problem: Problem, case: str | None) -> str:
    case = case or problem.config.case
    if case not in ("price", "network"):
        raise ValueError(f"unknown case {case!r}")
    return case


def solve_centralized(problem: Problem, case: str | None = None, tol: float = 1e-9) -> CentralizedSolution:
    """Minimize the fleet cost subject to every battery polytope and, for
    the network case, the coupling constraint.

    Raises
    ------
    ScenarioInfeasibleError
        With the coupling rows named by the infeasibility certificate.
    """
    case = _case_of(problem, case)
    cfg = problem.config
    N, T, dt = problem.n_agents, problem.horizon, problem.step_hours
    if case == "price":
        xs = [
            localqp.solve_fleet_only(poly, spec.kappa, dt * cfg.price, tol=tol)
            for spec, poly in zip(cfg.fleet, problem.polytopes)
        ]
        X = np.array(xs)
        return CentralizedSolution(X, problem.objective(X), np.zeros(0), 0, case)

    polys = problem.polytopes
    sizes = [p.n_free for p in polys]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    n = int(offs[-1])
    coupling = problem.coupling
    m_c = coupling.n_rows
    local_rows = sum(p.reduced_B.shape[0] for p in polys)
    A = np.zeros((local_rows + m_c, n))
    lo = np.empty(local_rows + m_c)
    hi = np.empty(local_rows + m_c)
    P = np.zeros(n)
    q = np.zeros(n)
    r = 0
    for k, (spec, poly) in enumerate(zip(cfg.fleet, polys)):
        cols = slice(offs[k], offs[k + 1])
        nb = poly.reduced_B.shape[0]
        A[r:r + nb, cols] = poly.reduced_B
        lo[r:r + nb] = poly.reduced_lo
        hi[r:r + nb] = poly.reduced_hi
        r += nb
        A[local_rows:, cols] = coupling.gammas[k][:, poly.window]
        P[cols] = 2.0 * spec.kappa
        q[cols] = dt * cfg.price[poly.window]
    lo[local_rows:] = -np.inf
    hi[local_rows:] = coupling.w
    try:
        res = solve_qp(np.diag(P), q, A, lo, hi, tol=tol)
    except QPInfeasibleError as exc:
        cert = exc.certificate[local_rows:]
        rows = np.flatnonzero(cert > 1e-9 * max(np.max(np.abs(exc.certificate)), 1e-300))
        report = [cpl.Violation(*coupling.row_info(int(i)), float(cert[i])) for i in rows]
        raise ScenarioInfeasibleError(
            f"no schedule meets the network limits; {len(report)} coupling rows in the certificate",
            violations=report,
        ) from exc
    X = np.zeros((N, T))
    for k, poly in enumerate(polys):
        X[k, poly.window] = res.z[offs[k]:offs[k + 1]]
    return CentralizedSolution(X, problem.objective(X), res.y[local_rows:], res.iterations, case)


# --------------------------------------------------------------------------
# trace and outputs


@dataclass
class RunTrace:
    """Per-iteration measurements and the final schedule of one run.

    ``dual_gap`` (largest edge disagreement) and ``dual_change`` (largest
    per-agent step) are in the units of the coupling system the agents
    ran on, i.e. after row equilibration when it is enabled.
    """

    iteration: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    error: list = field(default_factory=list)
    dual_gap: list = field(default_factory=list)
    primal_residual: list = field(default_factory=list)
    n_active: list = field(default_factory=list)
    dual_change: list = field(default_factory=list)
    obj_star: float | None = None
    converged: bool = False
    x_fleet: np.ndarray | None = None
    voltages: np.ndarray | None = None       # magnitudes, T x supply
    temperatures: np.ndarray | None = None
    per_ev_cost: np.ndarray | None = None
    lam: np.ndarray | None = None            # final local duals, N x rows
    runtime_s: float = 0.0

    def __len__(self) -> int:
        return len(self.iteration)

    def iterations_to(self, tol: float) -> int | None:
        """First iteration from which |error| stays below ``tol`` to the end."""
        err = np.abs(np.asarray(self.error, dtype=float))
        if err.size == 0 or not np.all(np.isfinite(err)):
            return None
        above = np.flatnonzero(err >= tol)
        if above.size == 0:
            return int(self.iteration[0])
        if above[-1] == err.size - 1:
            return None
        return int(self.iteration[above[-1] + 1])


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


class TraceWriter:
    """Append-only CSV; every row is flushed as soon as it is written."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(TRACE_COLUMNS)
        self._fh.flush()

    def write(self, row: Sequence) -> None:
        self._w.writerow([_fmt(v) for v in row])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_profiles(path, problem: Problem, x_fleet) -> None:
    """Long-format profiles: voltage magnitude per supply point, theta, x per EV."""
    v = np.sqrt(problem.voltages(x_fleet))
    theta = problem.temperatures(x_fleet)
    labels = problem.coupling.supply_labels
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_index", "series_id", "value"])
        for t in range(problem.horizon):
            for j, lab in enumerate(labels):
                w.writerow([t, f"voltage:{lab}", _fmt(v[t, j])])
            w.writerow([t, "theta", _fmt(theta[t])])
            for spec, x in zip(problem.config.fleet, x_fleet):
                w.writerow([t, f"x:{spec.ev_id}", _fmt(x[t])])


def write_metadata(path, problem: Problem, settings: AdmmSettings, failure: FailureSettings,
                   trace: RunTrace | None = None, extra: dict | None = None) -> None:
    cfg = problem.config
    meta = {
        "scenario": cfg.name,
        "case": cfg.case,
        "config": cfg.source,
        "admm": dataclasses.asdict(settings),
        "failure": dataclasses.asdict(failure),
        "graph": {"n_agents": problem.graph.n_agents, "edges": [list(e) for e in problem.graph.edges],
                  **problem.graph_meta},
        "versions": {"evconsensus": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    if trace is not None:
        meta.update({
            "iterations": len(trace), "converged": trace.converged, "obj_star": trace.obj_star,
            "final_objective": trace.objective[-1] if trace.objective else None,
            "runtime_s": trace.runtime_s,
        })
    if extra:
        meta.update(extra)
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, default=_json_default)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


# --------------------------------------------------------------------------
# distributed run


def stopping_criterion(dual_change: Sequence[float], primal_residual: Sequence[float],
                       eps_dual: float = 1e-6, eps_primal: float = 1e-6, window: int = 1) -> bool:
    """True when the last ``window`` iterations all have a dual step below
    ``eps_dual`` and a coupling violation below ``eps_primal``.

    Needs at least two iterations (and at least ``window``).
    """
    window = max(int(window), 1)
    n = len(dual_change)
    if n < max(2, window) or len(primal_residual) != n:
        return False
    dc = np.asarray(dual_change[-window:], dtype=float)
    pr = np.asarray(primal_residual[-window:], dtype=float)
    return bool(np.all(dc < eps_dual) and np.all(pr < eps_primal))


def build_agents(problem: Problem, settings: AdmmSettings, case: str | None = None):
    """Agents wired to the (optionally equilibrated) coupling system."""
    case = _case_of(problem, case)
    if problem.graph is None or problem.n_agents < 2:
        raise ConfigurationError("a distributed run needs at least two agents on a connected graph")
    system = problem.coupling if case == "network" else cpl.without_network(problem.coupling)
    if settings.equilibrate and system.n_rows:
        system, _ = cpl.equilibrate(system)
    cfg = problem.config
    g = problem.graph
    agents = [
        Agent(
            n, g.neighbors(n), cfg.fleet[n], problem.polytopes[n], system.gammas[n], system.w,
            problem.n_agents, cfg.price, cfg.step_hours, rho=settings.rho,
            proximal_form=settings.proximal_form, count_stale=settings.count_stale, qp_tol=settings.qp_tol,
        )
        for n in range(problem.n_agents)
    ]
    return agents, system


def run_distributed(
    problem: Problem,
    obj_star: float | None = None,
    settings: AdmmSettings | None = None,
    failure: FailureSettings | None = None,
    case: str | None = None,
    out_dir=None,
    workers: int | None = None,
    observers: list[Callable] | None = None,
    stop: bool = True,
) -> RunTrace:
    """Run the dual-consensus iteration until the stopping rule or ``max_iter``.

    Parameters
    ----------
    problem : Problem
    obj_star : float, optional
        Oracle objective; the error column is NaN without it.
    settings, failure : optional
        Default to the scenario's own blocks.
    case : {"price", "network"}, optional
        Default is the scenario's case.
    out_dir : path, optional
        When given, ``trace.csv`` is written while running and
        ``profiles.csv`` and ``metadata.json`` at the end.
    workers : int, optional
        Thread-pool size for the per-round agent updates.
    observers : list of callables, optional
        Passed to the message bus; called for every delivered message.
    stop : bool
        If False run all ``max_iter`` rounds regardless of the criterion.

    Warns
    -----
    ConvergenceWarning
        When ``max_iter`` is reached without meeting the criterion.
    """
    cfg = problem.config
    settings = settings or cfg.admm
    failure = failure or cfg.failure
    case = _case_of(problem, case)
    agents, _ = build_agents(problem, settings, case)
    original = problem.coupling
    graph = problem.graph
    model = FailureModel.uniform(graph, failure.alpha_hat, failure.alpha_bar, failure.seed)
    bus = MessageBus(graph, observers)
    edges = np.array(graph.edges, dtype=int).reshape(-1, 2)
    trace = RunTrace(obj_star=obj_star)
    writer = TraceWriter(Path(out_dir) / "trace.csv") if out_dir is not None else None
    pool = ThreadPoolExecutor(max_workers=workers) if workers and workers > 1 else None
    prev = np.stack([a.state.lam for a in agents])
    t0 = time.perf_counter()
    try:
        for tau in range(1, settings.max_iter + 1):
            sample = sample_round(graph, model, tau)
            payloads = {n: agents[n].broadcast() for n in range(len(agents)) if sample.active_agents[n]}
            inbox = bus.deliver(sample, payloads)
            active = [n for n in range(len(agents)) if sample.active_agents[n]]
            if pool is not None:
                list(pool.map(lambda n: agents[n].step(inbox[n]), active))
            else:
                for n in active:
                    agents[n].step(inbox[n])
            for n in range(len(agents)):
                if not sample.active_agents[n]:
                    agents[n].freeze()

            lam = np.stack([a.state.lam for a in agents])
            X = np.stack([a.x for a in agents])
            obj = problem.objective(X)
            err = (obj - obj_star) / obj_star if obj_star is not None else math.nan
            gap = float(np.max(np.abs(lam[edges[:, 0]] - lam[edges[:, 1]]), initial=0.0)) if lam.size else 0.0
            change = float(np.max(np.abs(lam - prev), initial=0.0))
            resid = float(np.max(np.maximum(-original.slack(X), 0.0), initial=0.0)) if case == "network" else 0.0
            prev = lam
            trace.iteration.append(tau)
            trace.objective.append(obj)
            trace.error.append(err)
            trace.dual_gap.append(gap)
            trace.primal_residual.append(resid)
            trace.n_active.append(len(active))
            trace.dual_change.append(change)
            if writer is not None:
                writer.write((tau, obj, err, gap, resid, len(active)))
            if stop and stopping_criterion(trace.dual_change, trace.primal_residual, settings.eps_dual,
                                           settings.eps_primal, settings.stop_window):
                trace.converged = True
                break
    finally:
        if writer is not None:
            writer.close()
        if pool is not None:
            pool.shutdown()
    trace.runtime_s = time.perf_counter() - t0
    if not trace.converged:
        trace.converged = stopping_criterion(trace.dual_change, trace.primal_residual, settings.eps_dual,
                                             settings.eps_primal, settings.stop_window)
    if not trace.converged:
        warnings.warn(
            f"stopping criterion not met after {len(trace)} iterations", ConvergenceWarning, stacklevel=2
        )
    X = np.stack([a.x for a in agents])
    trace.x_fleet = X
    trace.voltages = np.sqrt(problem.voltages(X))
    trace.temperatures = problem.temperatures(X)
    trace.per_ev_cost = np.array([
        flt.operational_cost(s, cfg.price, x, cfg.step_hours) for s, x in zip(cfg.fleet, X)
    ])
    trace.lam = np.stack([a.state.lam for a in agents])
    if out_dir is not None:
        write_profiles(Path(out_dir) / "profiles.csv", problem, X)
        write_metadata(Path(out_dir) / "metadata.json", problem, settings, failure, trace,
                       {"case": case})
    return trace


# --------------------------------------------------------------------------
# case study


@dataclass(frozen=True)
class CaseResult:
    case: str
    x_fleet: np.ndarray
    objective: float
    voltages: np.ndarray        # magnitudes, T x supply
    temperatures: np.ndarray
    violations: list
    soc_at_departure: np.ndarray


@dataclass(frozen=True)
class CaseStudy:
    price: CaseResult
    network: CaseResult
    tolerance: float


def _case_result(problem: Problem, case: str, X, tol: float) -> CaseResult:
    return CaseResult(
        case=case,
        x_fleet=X,
        objective=problem.objective(X),
        voltages=np.sqrt(problem.voltages(X)),
        temperatures=problem.temperatures(X),
        violations=cpl.violation_report(problem.coupling, X, tol=tol),
        soc_at_departure=problem.soc_at_departure(X),
    )


def run_case_study(problem: Problem, method: str = "centralized", tol: float | None = None,
                   out_dir=None, **run_kw) -> CaseStudy:
    """Price-only (Case 1) versus network-aware (Case 2) scheduling.

    ``method`` is ``"centralized"`` (oracle solves) or ``"distributed"``.
    Violations are counted beyond ``tol`` (default: the scenario's
    primal tolerance).
    """
    tol = problem.config.admm.eps_primal if tol is None else tol
    results = {}
    for case in ("price", "network"):
        if method == "centralized":
            X = solve_centralized(problem, case).x_fleet
        elif method == "distributed":
            X = run_distributed(problem, case=case, **run_kw).x_fleet
        else:
            raise ValueError(f"unknown method {method!r}")
        results[case] = _case_result(problem, case, X, tol)
    study = CaseStudy(results["price"], results["network"], tol)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for case, res in results.items():
            write_profiles(out / f"profiles_{case}.csv", problem, res.x_fleet)
        with open(out / "violations.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["case", "kind", "location", "time_index", "slack"])
            for case, res in results.items():
                for v in res.violations:
                    w.writerow([case, v.kind, v.location, v.t, _fmt(v.slack)])
    return study


# --------------------------------------------------------------------------
# command line

EXIT_OK, EXIT_ERROR, EXIT_MAX_ITER = 0, 1, 2


def _load(arg: str) -> Problem:
    from .scenario import BUNDLED, build_problem, load_bundled, load_scenario

    cfg = load_bundled(arg) if arg in BUNDLED and not Path(arg).exists() else load_scenario(arg)
    return build_problem(cfg)


def _overrides(problem: Problem, args) -> tuple[AdmmSettings, FailureSettings]:
    cfg = problem.config
    admm = cfg.admm
    if args.rho is not None:
        admm = dataclasses.replace(admm, rho=args.rho)
    if args.max_iter is not None:
        admm = dataclasses.replace(admm, max_iter=args.max_iter)
    fail = cfg.failure
    if getattr(args, "alpha_hat", None) is not None:
        fail = dataclasses.replace(fail, alpha_hat=args.alpha_hat)
    if getattr(args, "alpha_bar", None) is not None:
        fail = dataclasses.replace(fail, alpha_bar=args.alpha_bar)
    if args.seed is not None:
        fail = dataclasses.replace(fail, seed=args.seed)
    return admm, fail


def _oracle_value(problem: Problem, case: str) -> float | None:
    try:
        return solve_centralized(problem, case).objective
    except Exception as exc:  # the run is still meaningful without an error column
        log.warning("oracle failed: %s", exc)
        return None


def _cmd_run(args) -> int:
    problem = _load(args.scenario)
    case = args.case or problem.config.case
    admm, fail = _overrides(problem, args)
    obj_star = None if args.no_oracle else _oracle_value(problem, case)
    out = Path(args.out)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        trace = run_distributed(problem, obj_star, admm, fail, case=case, out_dir=out, workers=args.workers)
    status = "converged" if trace.converged else "max-iter reached"
    print(f"{status} after {len(trace)} iterations; objective {trace.objective[-1]:.10g}"
          + (f", error {trace.error[-1]:.3e}" if obj_star is not None else "") + f"; outputs in {out}")
    return EXIT_OK if trace.converged else EXIT_MAX_ITER


def _cmd_oracle(args) -> int:
    problem = _load(args.scenario)
    case = args.case or problem.config.case
    sol = solve_centralized(problem, case)
    out = {"scenario": problem.config.name, "case": case, "objective": sol.objective,
           "x": sol.x_fleet.tolist()}
    if args.out:
        path = Path(args.out)
        path.mkdir(parents=True, exist_ok=True)
        with open(path / "oracle.json", "w") as fh:
            json.dump(out, fh, indent=2)
        write_profiles(path / "profiles.csv", problem, sol.x_fleet)
    print(f"{case} objective {sol.objective:.12g}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    problem = _load(args.scenario)
    case = args.case or problem.config.case
    admm, fail = _overrides(problem, args)
    obj_star = _oracle_value(problem, case)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = args.seeds if args.seeds else [fail.seed]
    code = EXIT_OK
    rows = []
    for ah in args.alpha_hat_list:
        for ab in args.alpha_bar_list:
            for seed in seeds:
                f = FailureSettings(ah, ab, seed)
                sub = out / f"ah{ah:g}_ab{ab:g}_seed{seed}"
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", ConvergenceWarning)
                    tr = run_distributed(problem, obj_star, admm, f, case=case, out_dir=sub, workers=args.workers)
                if not tr.converged:
                    code = EXIT_MAX_ITER
                hit = tr.iterations_to(args.accuracy) if obj_star is not None else None
                rows.append((ah, ab, seed, len(tr), tr.converged, hit))
                print(f"alpha_hat={ah:g} alpha_bar={ab:g} seed={seed}: {len(tr)} iterations, "
                      f"converged={tr.converged}, to {args.accuracy:g}: {hit}")
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha_hat", "alpha_bar", "seed", "iterations", "converged", "iterations_to_accuracy"])
        w.writerows(rows)
    return code


def build_parser():
    import argparse

    p = argparse.ArgumentParser(prog="evconsensus", description="Network-aware distributed EV charging.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, failures=True):
        sp.add_argument("--scenario", required=True, help="scenario JSON, or small / medium / large")
        sp.add_argument("--case", choices=("price", "network"))
        sp.add_argument("--rho", type=float)
        sp.add_argument("--max-iter", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        if failures:
            sp.add_argument("--alpha-hat", type=float)
            sp.add_argument("--alpha-bar", type=float)

    r = sub.add_parser("run", help="distributed run with trace output")
    common(r)
    r.add_argument("--out", default="out")
    r.add_argument("--no-oracle", action="store_true", help="skip the centralized solve (no error column)")
    r.set_defaults(func=_cmd_run)

    o = sub.add_parser("oracle", help="centralized solve")
    o.add_argument("--scenario", required=True)
    o.add_argument("--case", choices=("price", "network"))
    o.add_argument("--out")
    o.set_defaults(func=_cmd_oracle)

    s = sub.add_parser("sweep", help="one run per failure setting")
    common(s, failures=False)
    s.add_argument("--alpha-hat-list", type=float, nargs="+", required=True)
    s.add_argument("--alpha-bar-list", type=float, nargs="+", required=True)
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--accuracy", type=float, default=1e-5)
    s.add_argument("--out", default="sweep")
    s.set_defaults(func=_cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=__import__("sys").stderr)
        return EXIT_ERROR
