import csv
import itertools
import json
import warnings

import numpy as np
import pytest
from conftest import bundled_oracle, bundled_problem, ev, make_config

from evconsensus import coupling as cpl
from evconsensus import fleet as flt
from evconsensus import runner as rn
from evconsensus import scenario as sc
from evconsensus.errors import ConfigurationError, ConvergenceWarning, ScenarioInfeasibleError

cp = pytest.importorskip("cvxpy")


def congested_pair():
    """N=2, T=2 with a transformer that binds when both EVs charge early."""
    fleet = [ev(f"e{k}", arrival=0, departure=2, capacity=20.0, soc0=0.2, target=0.5 + 0.1 * k,
                x_min=-4.0, x_max=8.0, kappa=0.01 * (k + 1)) for k in range(2)]
    return sc.build_problem(make_config(fleet, 2, price=[0.1, 0.5], base_kw=5.0, i_eq=35.0, theta_max=354.0))


def relaxed(problem, band=90.0):
    cfg = problem.config
    th = cfg.thermal
    loose = cfg.with_overrides(voltage_band_percent=band,
                               thermal=type(th)(**{**th.__dict__, "theta_max": 5000.0}))
    return sc.build_problem(loose)


def cvxpy_oracle(problem, case="network"):
    """Fleet problem from the raw charging rules and the assembled coupling rows."""
    cfg = problem.config
    N, T, dt = problem.n_agents, problem.horizon, problem.step_hours
    X = cp.Variable((N, T))
    cons, obj = [], 0
    for n, spec in enumerate(cfg.fleet):
        x = X[n]
        avail = spec.availability(T)
        soc = spec.soc0 + spec.efficiency * dt / spec.capacity * cp.cumsum(x)
        cons += [soc >= spec.soc_min, soc <= spec.soc_max, soc[T - 1] == spec.soc_target]
        cons += [x[t] == 0 for t in range(T) if not avail[t]]
        cons += [x >= spec.x_min, x <= spec.x_max]
        obj = obj + spec.kappa * cp.sum_squares(x) + dt * cfg.price @ x
    if case == "network":
        c = problem.coupling
        cons.append(sum(c.gammas[n] @ X[n] for n in range(N)) <= c.w)
    prob = cp.Problem(cp.Minimize(obj), cons)
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    return X.value, prob.value


# --------------------------------------------------------------------------
# centralized oracle


@pytest.mark.parametrize("name,case", [("small", "network"), ("medium", "network"), ("medium", "price")])
def test_oracle_matches_interior_point(name, case):
    prob = bundled_problem(name)
    sol = bundled_oracle(name, case)
    X, f = cvxpy_oracle(prob, case)
    assert sol.objective == pytest.approx(f, rel=1e-7)
    np.testing.assert_allclose(sol.x_fleet, X, atol=1e-4)


def test_single_ev_flat_price_uniform_profile():
    spec = ev(arrival=1, departure=4, capacity=12.0, soc0=0.2, target=0.7, x_min=-3.0, x_max=5.0)
    prob = sc.build_problem(make_config([spec], 5))
    assert prob.graph is None
    sol = rn.solve_centralized(prob)
    np.testing.assert_allclose(sol.x_fleet[0], [0, 2, 2, 2, 0], atol=1e-8)
    # brute force over the two free coordinates of the window
    best, arg = np.inf, None
    for a, b in itertools.product(np.arange(-3, 5.001, 0.05), repeat=2):
        x = np.array([0, a, b, 6 - a - b, 0])
        if prob.polytopes[0].contains(x):
            f = prob.objective(x[None])
            if f < best:
                best, arg = f, x
    np.testing.assert_allclose(arg, sol.x_fleet[0], atol=0.05 + 1e-9)


def test_non_binding_limits_decouple():
    prob = relaxed(bundled_problem("medium"))
    sol = rn.solve_centralized(prob, "network")
    cfg = prob.config
    for n, (spec, poly) in enumerate(zip(cfg.fleet, prob.polytopes)):
        alone = rn.localqp.solve_fleet_only(poly, spec.kappa, cfg.step_hours * cfg.price)
        np.testing.assert_allclose(sol.x_fleet[n], alone, atol=1e-6)


@pytest.mark.parametrize("name", ["small", "medium", "large"])
def test_price_case_is_a_relaxation(name):
    assert bundled_oracle(name, "price").objective <= bundled_oracle(name, "network").objective + 1e-9


def test_widened_limits_cases_agree():
    study = rn.run_case_study(relaxed(bundled_problem("small")))
    assert study.network.objective == pytest.approx(study.price.objective, rel=1e-6)


def test_infeasible_network_named_rows():
    spec = ev(arrival=0, departure=3, capacity=20.0, soc0=0.1, target=0.9, x_min=0.0, x_max=8.0)
    prob = sc.build_problem(make_config([spec, ev("b", arrival=0, departure=3)], 3, i_eq=25.0, theta_max=353.2))
    with pytest.raises(ScenarioInfeasibleError) as info:
        rn.solve_centralized(prob, "network")
    assert info.value.violations
    assert {v.kind for v in info.value.violations} == {"thermal"}


def test_printed_prox_closes_loop_with_dual_update():
    # at the fixed point the agents' lambda must be the network multiplier of the
    # centralized problem; the unscaled variant ends at that multiplier over rho
    prob = bundled_problem("small")
    sol = bundled_oracle("small")
    _, d = cpl.equilibrate(prob.coupling)
    mu = sol.duals / d
    assert np.max(np.abs(mu)) > 0.1
    tight = dict(rho=2.0, eps_dual=1e-9, eps_primal=1e-9, max_iter=20000)
    printed = rn.run_distributed(prob, sol.objective, sc.AdmmSettings(**tight))
    unscaled = rn.run_distributed(prob, sol.objective, sc.AdmmSettings(proximal_form="unscaled", **tight))
    np.testing.assert_allclose(printed.lam, np.broadcast_to(mu, printed.lam.shape), atol=1e-6)
    np.testing.assert_allclose(unscaled.lam, np.broadcast_to(mu / 2.0, unscaled.lam.shape), atol=1e-6)
    assert np.max(np.abs(unscaled.lam - mu)) > 0.1


@pytest.mark.filterwarnings("ignore::evconsensus.errors.ConvergenceWarning")
def test_forms_coincide_at_unit_rho():
    prob = bundled_problem("small")
    a = rn.run_distributed(prob, settings=sc.AdmmSettings(rho=1.0, max_iter=60), stop=False)
    b = rn.run_distributed(prob, settings=sc.AdmmSettings(rho=1.0, max_iter=60, proximal_form="unscaled"), stop=False)
    np.testing.assert_allclose(a.lam, b.lam, atol=1e-12)


# --------------------------------------------------------------------------
# distributed runs


def test_single_agent_rejected():
    prob = sc.build_problem(make_config([ev()], 4))
    with pytest.raises(ConfigurationError):
        rn.run_distributed(prob)


def test_pair_reaches_oracle():
    prob = congested_pair()
    sol = rn.solve_centralized(prob)
    assert sol.objective > rn.solve_centralized(prob, "price").objective + 1e-3
    tr = rn.run_distributed(prob, sol.objective, sc.AdmmSettings(max_iter=5000))
    assert tr.converged
    assert abs(tr.error[-1]) < 1e-4


def test_final_schedule_feasible():
    prob = bundled_problem("medium")
    tr = rn.run_distributed(prob, bundled_oracle("medium").objective)
    assert tr.converged
    for spec, poly, x in zip(prob.config.fleet, prob.polytopes, tr.x_fleet):
        assert poly.contains(x, tol=1e-9)
        assert flt.soc_profile(spec, x, prob.step_hours)[-1] == pytest.approx(spec.soc_target, abs=1e-9)
    assert np.min(prob.coupling.slack(tr.x_fleet)) > -prob.config.admm.eps_primal


def test_criterion_implies_small_error():
    prob = bundled_problem("small")
    obj = bundled_oracle("small").objective
    for rho in (0.5, 1.0, 3.0):
        tr = rn.run_distributed(prob, obj, sc.AdmmSettings(rho=rho))
        assert tr.converged and abs(tr.error[-1]) < 1e-3


def test_error_trend_and_dual_disagreement_decay():
    prob = bundled_problem("small")
    tr = rn.run_distributed(prob, bundled_oracle("small").objective, sc.AdmmSettings(max_iter=600), stop=False)
    err = np.abs(tr.error)
    gap = np.asarray(tr.dual_gap)
    err_w = [err[k:k + 100].max() for k in range(0, 600, 100)]
    gap_w = [gap[k:k + 50].max() for k in range(0, 600, 50)]
    assert all(b <= a for a, b in zip(err_w, err_w[1:]))
    assert all(b <= a * (1 + 1e-9) + 1e-14 for a, b in zip(gap_w, gap_w[1:]))
    assert err[-1] < 1e-6


def test_stopping_criterion_examples():
    assert rn.stopping_criterion([0.0, 0.0], [0.0, 0.0])
    assert not rn.stopping_criterion([0.0], [0.0])
    assert not rn.stopping_criterion([0.0, 0.0], [0.0, 2e-6])
    assert not rn.stopping_criterion([0.0] * 5, [0.0] * 5, window=10)
    assert not rn.stopping_criterion([1.0] + [0.0] * 9, [0.0] * 10, window=10)
    assert rn.stopping_criterion([1.0] + [0.0] * 10, [0.0] * 11, window=10)


def test_first_round_not_converged():
    prob = bundled_problem("small")
    with pytest.warns(ConvergenceWarning):
        tr = rn.run_distributed(prob, settings=sc.AdmmSettings(max_iter=2, stop_window=1))
    assert not tr.converged
    assert not rn.stopping_criterion(tr.dual_change, tr.primal_residual)


@pytest.mark.filterwarnings("ignore::evconsensus.errors.ConvergenceWarning")
def test_same_seed_same_trace(tmp_path):
    prob = bundled_problem("small")
    fail = sc.FailureSettings(0.7, 0.3, seed=5)
    adm = sc.AdmmSettings(max_iter=400)
    rn.run_distributed(prob, 1.0, adm, fail, out_dir=tmp_path / "a")
    rn.run_distributed(prob, 1.0, adm, fail, out_dir=tmp_path / "b", workers=4)
    assert (tmp_path / "a/trace.csv").read_bytes() == (tmp_path / "b/trace.csv").read_bytes()
    rn.run_distributed(prob, 1.0, adm, sc.FailureSettings(0.7, 0.3, seed=6), out_dir=tmp_path / "c")
    assert (tmp_path / "a/trace.csv").read_bytes() != (tmp_path / "c/trace.csv").read_bytes()


@pytest.mark.filterwarnings("ignore::evconsensus.errors.ConvergenceWarning")
def test_inactive_agents_counted_and_frozen():
    prob = bundled_problem("medium")
    seen = []
    tr = rn.run_distributed(prob, settings=sc.AdmmSettings(max_iter=30), failure=sc.FailureSettings(0.5, 0.0, 1),
                            observers=[lambda s, d, m: seen.append((s, d))], stop=False)
    assert min(tr.n_active) < prob.n_agents
    assert all(0 <= k <= prob.n_agents for k in tr.n_active)
    assert all(d in prob.graph.neighbors(s) for s, d in seen)


@pytest.mark.filterwarnings("ignore::evconsensus.errors.ConvergenceWarning")
def test_trace_flushed_each_round(tmp_path):
    prob = bundled_problem("small")
    lines = []

    def peek(src, dst, msg):
        if src == 0:
            lines.append((msg.stamp, (tmp_path / "trace.csv").read_text().count("\n")))

    rn.run_distributed(prob, settings=sc.AdmmSettings(max_iter=20), out_dir=tmp_path, observers=[peek], stop=False)
    # during round tau the rows of every finished round are already on disk
    assert lines and all(n_lines == 1 + stamp for stamp, n_lines in lines)


def test_output_files(tmp_path):
    prob = bundled_problem("small")
    tr = rn.run_distributed(prob, bundled_oracle("small").objective, out_dir=tmp_path)
    with open(tmp_path / "trace.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == rn.TRACE_COLUMNS
    assert len(rows) == len(tr) + 1
    assert float(rows[-1][2]) == tr.error[-1]
    with open(tmp_path / "profiles.csv") as fh:
        prof = list(csv.DictReader(fh))
    ids = {r["series_id"] for r in prof}
    assert "theta" in ids and {f"x:{s.ev_id}" for s in prob.config.fleet} <= ids
    assert any(i.startswith("voltage:") for i in ids)
    meta = json.loads((tmp_path / "metadata.json").read_text())
    assert meta["admm"]["rho"] == prob.config.admm.rho
    assert "failure" in meta and "graph" in meta and "versions" in meta


# --------------------------------------------------------------------------
# case study


def test_case_study_outputs(tmp_path):
    prob = bundled_problem("medium")
    study = rn.run_case_study(prob, out_dir=tmp_path)
    assert study.network.violations == []
    assert study.price.violations
    np.testing.assert_allclose(study.network.soc_at_departure, [s.soc_target for s in prob.config.fleet], atol=1e-6)
    rows = list(csv.DictReader(open(tmp_path / "violations.csv")))
    assert {r["case"] for r in rows} == {"price"}
    assert (tmp_path / "profiles_price.csv").exists() and (tmp_path / "profiles_network.csv").exists()


def test_case_study_distributed_agrees():
    prob = bundled_problem("small")
    with warnings.catch_warnings():
        warnings.simplefilter("error", ConvergenceWarning)
        dist = rn.run_case_study(prob, method="distributed")
    cen = rn.run_case_study(prob)
    assert dist.network.objective == pytest.approx(cen.network.objective, rel=1e-5)
    assert dist.price.objective == pytest.approx(cen.price.objective, rel=1e-5)
    assert dist.network.violations == []


# --------------------------------------------------------------------------
# command line


def test_cli_run_converges(tmp_path, capsys):
    assert rn.main(["run", "--scenario", "small", "--out", str(tmp_path)]) == 0
    assert "converged" in capsys.readouterr().out
    assert (tmp_path / "trace.csv").exists()


@pytest.mark.filterwarnings("ignore::evconsensus.errors.ConvergenceWarning")
def test_cli_max_iter_exit_code(tmp_path):
    assert rn.main(["run", "--scenario", "small", "--max-iter", "3", "--out", str(tmp_path), "--no-oracle"]) == 2


def test_cli_error_exit_code(tmp_path, capsys):
    assert rn.main(["run", "--scenario", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_cli_oracle(tmp_path):
    assert rn.main(["oracle", "--scenario", "small", "--out", str(tmp_path)]) == 0
    data = json.loads((tmp_path / "oracle.json").read_text())
    assert data["objective"] == pytest.approx(bundled_oracle("small").objective, rel=1e-12)


def test_cli_sweep(tmp_path):
    code = rn.main(["sweep", "--scenario", "small", "--alpha-hat-list", "1", "0.8", "--alpha-bar-list", "0",
                    "--seeds", "1", "2", "--out", str(tmp_path)])
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "summary.csv")))
    assert len(rows) == 4
    assert all(r["converged"] == "True" for r in rows)
    assert len(list(tmp_path.glob("*/trace.csv"))) == 4
