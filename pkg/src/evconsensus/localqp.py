"""
Per-agent strictly convex QP

    minimize    kappa*||x||^2 + lin @ x + weight*||Gamma x + s - center||^2
    subject to  x in Psi (battery polytope),  s >= 0.

For fixed x the optimal slack is ``s = (center - Gamma x)_+``, which leaves
a piecewise-quadratic, continuously differentiable problem in the plugged-in
slots of x only.  That reduced problem is solved by a primal-dual active-set
(semismooth Newton) iteration.  Working sets that are linearly dependent
(bounds plus the energy equality when the required charge is tiny) are
resolved by searching their independent subsets.  When the active set still
cycles, the lifted QP in (x, s) goes to the general operator-splitting
solver in :mod:`evconsensus.qp` and the active-set step is re-run from the
working set its multipliers identify.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import lsq_linear

from .errors import SolverError
from .fleet import BatteryPolytope
from .qp import solve_qp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LocalQP:
    polytope: BatteryPolytope
    kappa: float
    lin: np.ndarray
    gamma: np.ndarray
    weight: float
    center: np.ndarray

    @property
    def horizon(self) -> int:
        return self.polytope.horizon

    @property
    def n_rows(self) -> int:
        return self.gamma.shape[0]

    def objective(self, x, s=None) -> float:
        x = np.asarray(x, dtype=float)
        val = self.kappa * x @ x + self.lin @ x
        if self.n_rows and self.weight:
            if s is None:
                s = np.maximum(self.center - self.gamma @ x, 0.0)
            r = self.gamma @ x + s - self.center
            val += self.weight * r @ r
        return float(val)

    def optimal_slack(self, x) -> np.ndarray:
        if not self.n_rows:
            return np.zeros(0)
        return np.maximum(self.center - self.gamma @ np.asarray(x, dtype=float), 0.0)


@dataclass(frozen=True)
class LocalSolution:
    x: np.ndarray
    s: np.ndarray
    residual: float
    iterations: int
    # active-set labels over the reduced polytope rows: -1 lower, +1 upper, 0 free
    bound_state: np.ndarray = field(repr=False)
    # positive-part rows of Gamma x - center that are switched on
    on_rows: np.ndarray = field(repr=False)

    @property
    def u(self) -> np.ndarray:
        return np.concatenate([self.x, self.s])


class _Reduced:
    """Problem data restricted to plugged-in slots and nonzero coupling rows."""

    def __init__(self, qp: LocalQP):
        poly = qp.polytope
        self.qp = qp
        self.window = poly.window
        self.B = poly.reduced_B
        self.lo = poly.reduced_lo
        self.hi = poly.reduced_hi
        self.is_eq = self.lo == self.hi
        self.g = np.asarray(qp.lin, dtype=float)[self.window]
        self.kappa = qp.kappa
        self.L = self.window.shape[0]
        if qp.n_rows and qp.weight > 0:
            G = qp.gamma[:, self.window]
            keep = np.flatnonzero(np.any(G != 0.0, axis=1))
            self.rows = keep
            self.G = np.ascontiguousarray(G[keep])
            self.c = np.asarray(qp.center, dtype=float)[keep]
            self.alpha = qp.weight
        else:
            self.rows = np.zeros(0, dtype=int)
            self.G = np.zeros((0, self.L))
            self.c = np.zeros(0)
            self.alpha = 0.0
        self.scale = 2.0 * self.kappa + 2.0 * self.alpha * float(np.max(np.sum(self.G**2, axis=0), initial=0.0))

    def gradient(self, z):
        grad = 2.0 * self.kappa * z + self.g
        if self.alpha:
            grad = grad + 2.0 * self.alpha * (self.G.T @ np.maximum(self.G @ z - self.c, 0.0))
        return grad

    def kkt(self, on, state):
        """Solve the equality-constrained QP for a fixed working set."""
        L = self.L
        Gs = self.G[on]
        H = 2.0 * self.kappa * np.eye(L) + 2.0 * self.alpha * (Gs.T @ Gs)
        rhs = -self.g + 2.0 * self.alpha * (Gs.T @ self.c[on])
        work = np.flatnonzero(state != 0)
        fac = cho_factor(H, lower=True, check_finite=False)
        z0 = cho_solve(fac, rhs, check_finite=False)
        mu = np.zeros(self.B.shape[0])
        if work.size == 0:
            return z0, mu
        Bw = self.B[work]
        target = np.where(state[work] > 0, self.hi[work], self.lo[work])
        HiBt = cho_solve(fac, Bw.T, check_finite=False)
        schur = Bw @ HiBt
        mu_w, _, rank, _ = np.linalg.lstsq(schur, Bw @ z0 - target, rcond=1e-12)
        if rank < work.size:
            picked = self._consistent_subset(work, state, H, rhs, Bw, target, z0, HiBt, schur, rank)
            if picked is not None:
                return picked
            # no subset is both feasible and sign-correct: z from an independent
            # subset (equalities first), then sign-constrained multipliers
            keep = _independent_rows(Bw, np.argsort(~self.is_eq[work], kind="stable"))
            sub = np.zeros(work.size)
            sub[keep] = np.linalg.solve(schur[np.ix_(keep, keep)], (Bw @ z0 - target)[keep])
            z = z0 - HiBt @ sub
            grad = H @ z - rhs
            # only rows that actually hold at z may carry a multiplier
            held = np.abs(Bw @ z - target) <= 1e-12 * (1.0 + np.abs(target))
            cols = work[held]
            eq = self.is_eq[cols]
            up = state[cols] > 0
            lb = np.where(eq, -np.inf, np.where(up, 0.0, -np.inf))
            ub = np.where(eq, np.inf, np.where(up, np.inf, 0.0))
            if cols.size:
                mu[cols] = lsq_linear(self.B[cols].T, -grad, bounds=(lb, ub), method="bvls").x
            return z, mu
        z, mu_w = _refine(H, rhs, Bw, target, z0 - HiBt @ mu_w, mu_w)
        mu[work] = mu_w
        return z, mu

    def _consistent_subset(self, work, state, H, rhs, Bw, target, z0, HiBt, schur, rank, limit=256):
        """Search the independent subsets of a dependent working set.

        Tiny energy totals make bound and equality rows nearly dependent
        but inconsistent, so which bound to drop matters.  Among subsets
        with correctly signed multipliers, returns the one whose solution
        violates the polytope least, or None if none is feasible to 1e-10.
        """
        eq_pos = np.flatnonzero(self.is_eq[work])
        ineq_pos = np.flatnonzero(~self.is_eq[work])
        k = rank - eq_pos.size
        if k < 0 or k > ineq_pos.size:
            return None
        r = Bw @ z0 - target
        scale = 1.0 + np.abs(self.hi) + np.abs(self.lo)
        best, best_viol = None, np.inf
        for combo in itertools.islice(itertools.combinations(ineq_pos, k), limit):
            keep = np.concatenate([eq_pos, np.array(combo, dtype=int)])
            S = schur[np.ix_(keep, keep)]
            if np.linalg.matrix_rank(S, tol=1e-12 * max(np.max(np.abs(S)), 1e-300)) < keep.size:
                continue
            mu_k = np.linalg.solve(S, r[keep])
            rows = work[keep]
            up = state[rows] > 0
            ineq = ~self.is_eq[rows]
            if np.any(ineq & up & (mu_k < 0)) or np.any(ineq & ~up & (mu_k > 0)):
                continue
            z, mu_k = _refine(H, rhs, Bw[keep], target[keep], z0 - HiBt[:, keep] @ mu_k, mu_k)
            Bz = self.B @ z
            viol = float(np.max(np.maximum(Bz - self.hi, self.lo - Bz) / scale))
            if viol < best_viol:
                mu = np.zeros(self.B.shape[0])
                mu[rows] = mu_k
                best, best_viol = (z, mu), viol
        return best if best_viol <= 1e-10 else None


def _refine(H, rhs, Bk, tk, z, mu):
    """One step of iterative refinement on the KKT system of a working set.

    The Schur-complement solve loses accuracy when kappa is small next to
    the quadratic penalty; the residuals are recomputed and corrected with
    the full (well-posed) KKT matrix.
    """
    L, k = z.size, tk.size
    K = np.zeros((L + k, L + k))
    K[:L, :L] = H
    K[:L, L:] = Bk.T
    K[L:, :L] = Bk
    res = np.concatenate([rhs - H @ z - Bk.T @ mu, tk - Bk @ z])
    try:
        d = np.linalg.solve(K, res)
    except np.linalg.LinAlgError:
        return z, mu
    return z + d[:L], mu + d[L:]


def _independent_rows(M, order, tol=1e-10):
    """Greedy pick of linearly independent rows of ``M`` in ``order``."""
    basis = np.zeros((0, M.shape[1]))
    keep = []
    for i in order:
        r = M[i] - basis.T @ (basis @ M[i])
        nr = np.linalg.norm(r)
        if nr > tol * max(np.linalg.norm(M[i]), 1e-300):
            basis = np.vstack([basis, r / nr])
            keep.append(i)
    return np.array(sorted(keep), dtype=int)


def _initial_state(red: _Reduced, z, tol):
    Bz = red.B @ z
    state = np.zeros(red.B.shape[0], dtype=np.int8)
    state[Bz >= red.hi - tol] = 1
    state[Bz <= red.lo + tol] = -1
    state[red.is_eq] = 1
    on = (red.G @ z - red.c) > 0 if red.G.shape[0] else np.zeros(0, dtype=bool)
    return state, on


def _active_set(red: _Reduced, state, on, tol, max_iter):
    """Primal-dual active-set iteration from a starting working set.

    Returns (z, mu, state, on, converged, iterations).
    """
    cp = max(red.scale, 1e-12)
    seen = set()
    z = mu = None
    feas_tol = max(tol, 1e-10)
    for it in range(1, max_iter + 1):
        key = (state.tobytes(), on.tobytes())
        if key in seen:
            return z, mu, state, on, False, it
        seen.add(key)
        z, mu = red.kkt(on, state)
        Bz = red.B @ z
        r = red.G @ z - red.c
        ok_primal = np.all(Bz <= red.hi + feas_tol) and np.all(Bz >= red.lo - feas_tol)
        ineq = ~red.is_eq
        ok_dual = np.all(mu[ineq & (state > 0)] >= -tol) and np.all(mu[ineq & (state < 0)] <= tol)
        ok_on = np.all(r[on] >= -feas_tol) and np.all(r[~on] <= feas_tol)
        # dependent working sets can leave a residual that the signs hide
        ok_stat = _stationarity(red, z, mu) <= 1e2 * tol
        if ok_primal and ok_dual and ok_on and ok_stat:
            return z, mu, state, on, True, it
        new_state = np.zeros_like(state)
        new_state[(mu + cp * (Bz - red.hi)) > 0] = 1
        new_state[(mu + cp * (Bz - red.lo)) < 0] = -1
        new_state[red.is_eq] = 1
        state = new_state
        on = r > 0
    return z, mu, state, on, False, max_iter


def _dense_solve(red: _Reduced, tol, max_iter):
    """Lifted QP in (z, s) handed to the general splitting solver.

    Returns (z, mu, iterations) with ``mu`` the multipliers of the polytope rows.
    """
    L, k, p = red.L, red.G.shape[0], red.B.shape[0]
    a = red.alpha
    P = np.zeros((L + k, L + k))
    P[:L, :L] = 2.0 * red.kappa * np.eye(L) + 2.0 * a * (red.G.T @ red.G)
    P[:L, L:] = 2.0 * a * red.G.T
    P[L:, :L] = 2.0 * a * red.G
    P[L:, L:] = 2.0 * a * np.eye(k)
    q = np.concatenate([red.g - 2.0 * a * (red.G.T @ red.c), -2.0 * a * red.c])
    A = np.zeros((p + k, L + k))
    A[:p, :L] = red.B
    A[p:, L:] = np.eye(k)
    lo = np.concatenate([red.lo, np.zeros(k)])
    hi = np.concatenate([red.hi, np.full(k, np.inf)])
    res = solve_qp(P, q, A, lo, hi, tol=tol, max_iter=max_iter)
    return res.z[:L], res.y[:p], res.iterations


def solve(qp: LocalQP, warm_start: LocalSolution | None = None, tol: float = 1e-8,
          max_iter: int | None = None) -> LocalSolution:
    """Minimize the local QP over Psi x {s >= 0}.

    Parameters
    ----------
    qp : LocalQP
    warm_start : LocalSolution, optional
        Previous solution; its active set seeds the iteration.
    tol : float
        Bound on the stationarity residual of the returned point.
    max_iter : int, optional
        Iteration budget shared by the active-set steps and the splitting
        fallback, default 20000.  Active-set solves rarely need more than a
        handful; the rest is headroom for ill-conditioned fallbacks.

    Raises
    ------
    SolverError
        When the budget is exhausted; carries the best iterate.
    """
    red = _Reduced(qp)
    budget = max_iter if max_iter is not None else 20000
    if red.L == 0:
        x = np.zeros(qp.horizon)
        return LocalSolution(x, qp.optimal_slack(x), 0.0, 0, np.zeros(0, np.int8), np.zeros(0, bool))

    if warm_start is not None and warm_start.bound_state.shape == (red.B.shape[0],) \
            and warm_start.on_rows.shape == (red.G.shape[0],):
        state, on = warm_start.bound_state.copy(), warm_start.on_rows.copy()
        z_start = warm_start.x[red.window]
    else:
        z_start = np.clip(np.zeros(red.L), red.lo[:red.L], red.hi[:red.L])
        state, on = _initial_state(red, z_start, 1e-9)

    pdas_cap = 30
    z, mu, state, on, ok, used = _active_set(red, state, on, tol * 1e-2, min(pdas_cap, budget))
    best = None
    if z is not None:
        res = _stationarity(red, z, mu)
        if ok and res <= tol:
            return _finish(qp, red, z, res, used, state, on)
        best = (z, res)
    # degenerate or cycling working sets: solve the lifted problem by
    # splitting, loosely first, then re-run the active-set step from its
    # working set; the splitting point itself is accepted if accurate enough
    for dense_tol in (1e-5, tol * 1e-2):
        if used >= budget:
            break
        try:
            z, mu, it = _dense_solve(red, dense_tol, budget - used)
        except SolverError as exc:
            log.debug("dense fallback failed: %s", exc)
            used = budget
            break
        used += it
        res = _stationarity(red, z, mu)
        if best is None or res < best[1]:
            best = (z, res)
        # working set from the multiplier signs: positions alone are ambiguous
        # when several bounds sit within the solver tolerance
        big = np.abs(mu) > 10.0 * dense_tol * (1.0 + np.max(np.abs(mu), initial=0.0))
        state = np.where(big, np.sign(mu), 0).astype(np.int8)
        state[red.is_eq] = 1
        on = (red.G @ z - red.c) > 0
        z2, mu2, state2, on2, ok2, it = _active_set(red, state, on, tol * 1e-2, pdas_cap)
        used += it
        if z2 is not None and ok2:
            res2 = _stationarity(red, z2, mu2)
            if res2 <= tol:
                return _finish(qp, red, z2, res2, used, state2, on2)
        if res <= tol and qp.polytope.contains(qp.polytope.expand(z), tol=1e-9):
            return _finish(qp, red, z, res, used, state, on)
    x_best = qp.polytope.expand(best[0]) if best is not None else qp.polytope.expand(np.zeros(red.L))
    raise SolverError(
        f"local QP not solved within {budget} iterations",
        best=x_best,
        residual=best[1] if best is not None else float("inf"),
    )


def _stationarity(red: _Reduced, z, mu) -> float:
    return float(np.max(np.abs(red.gradient(z) + red.B.T @ mu), initial=0.0))


def _finish(qp, red, z, res, iters, state, on) -> LocalSolution:
    x = qp.polytope.expand(z)
    return LocalSolution(
        x=x, s=qp.optimal_slack(x), residual=res, iterations=iters,
        bound_state=state.copy(), on_rows=on.copy(),
    )


def solve_fleet_only(polytope: BatteryPolytope, kappa: float, lin, tol: float = 1e-10) -> np.ndarray:
    """Minimize kappa*||x||^2 + lin @ x over Psi alone (no network terms)."""
    qp = LocalQP(polytope, kappa, np.asarray(lin, dtype=float), np.zeros((0, polytope.horizon)), 0.0, np.zeros(0))
    return solve(qp, tol=tol).x
