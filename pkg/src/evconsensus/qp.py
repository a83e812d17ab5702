"""
Dense convex QP solver

    minimize    1/2 z'Pz + q'z
    subject to  l <= A z <= u

with P positive definite.  An operator-splitting (ADMM) phase with
per-row penalties and closed-form box projection locates the active set;
a primal-dual active-set phase then solves the KKT system on that set
exactly and certifies the result.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import SolverError


class QPInfeasibleError(SolverError):
    """Raised with a Farkas-type ``certificate`` y: A'y = 0 and u'y+ - l'y- < 0."""

    def __init__(self, message: str, certificate: np.ndarray):
        super().__init__(message, best=None, residual=float("inf"))
        self.certificate = certificate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class QPResult:
    z: np.ndarray
    y: np.ndarray            # constraint multipliers (>0 upper active, <0 lower active)
    objective: float
    primal_residual: float
    dual_residual: float
    iterations: int
    polished: bool


def _kkt_residuals(P, q, A, l, u, z, y):
    Az = A @ z
    prim = float(np.max(np.maximum(Az - u, 0.0) + np.maximum(l - Az, 0.0), initial=0.0))
    dual = float(np.max(np.abs(P @ z + q + A.T @ y), initial=0.0))
    return prim, dual


def _certifies_infeasible(A, l, u, dy, eps: float = 1e-7) -> bool:
    norm = float(np.max(np.abs(dy), initial=0.0))
    if norm == 0.0:
        return False
    pos, neg = np.maximum(dy, 0.0), np.minimum(dy, 0.0)
    if np.any((pos > 0) & np.isinf(u)) or np.any((neg < 0) & np.isinf(l)):
        return False
    support = float(np.where(pos > 0, u, 0.0) @ pos + np.where(neg < 0, l, 0.0) @ neg)
    return float(np.max(np.abs(A.T @ dy), initial=0.0)) < eps * norm and support < -eps * norm


def _polish(P, q, A, l, u, state, tol, max_iter=50):
    """Primal-dual active-set iteration from a working set ``state``."""
    is_eq = l == u
    cp = float(np.max(np.diag(P)))
    fac = cho_factor(P, lower=True, check_finite=False)
    z0 = cho_solve(fac, -q, check_finite=False)
    seen = set()
    for _ in range(max_iter):
        key = state.tobytes()
        if key in seen:
            return None
        seen.add(key)
        work = np.flatnonzero(state != 0)
        y = np.zeros(A.shape[0])
        if work.size:
            Aw = A[work]
            target = np.where(state[work] > 0, u[work], l[work])
            PiAt = cho_solve(fac, Aw.T, check_finite=False)
            schur = Aw @ PiAt
            rhs = Aw @ z0 - target
            try:
                yw = np.linalg.solve(schur + 1e-14 * np.trace(schur) / len(work) * np.eye(len(work)), rhs)
                if not np.allclose(schur @ yw, rhs, rtol=1e-9, atol=1e-10):
                    raise np.linalg.LinAlgError
            except np.linalg.LinAlgError:
                yw = np.linalg.lstsq(schur, rhs, rcond=1e-12)[0]
            z = z0 - PiAt @ yw
            y[work] = yw
        else:
            z = z0
        Az = A @ z
        ineq = ~is_eq
        ok = (
            np.all(Az <= u + tol) and np.all(Az >= l - tol)
            and np.all(y[ineq & (state > 0)] >= -tol) and np.all(y[ineq & (state < 0)] <= tol)
        )
        if ok:
            return z, y
        new = np.zeros_like(state)
        new[(y + cp * (Az - u)) > 0] = 1
        new[(y + cp * (Az - l)) < 0] = -1
        new[is_eq] = 1
        state = new
    return None


def solve_qp(P, q, A, l, u, tol: float = 1e-9, max_iter: int = 20000, check_every: int = 25,
             polish: bool = True) -> QPResult:
    """Solve the QP to primal/dual residual ``tol``.

    Raises
    ------
    SolverError
        If neither the splitting phase nor the polish reaches ``tol``.
    """
    P = np.asarray(P, dtype=float)
    q = np.asarray(q, dtype=float)
    A = np.asarray(A, dtype=float)
    l = np.asarray(l, dtype=float)
    u = np.asarray(u, dtype=float)
    n, m = P.shape[0], A.shape[0]
    is_eq = np.isclose(l, u, rtol=0.0, atol=1e-14)

    # Ruiz-style row scaling of A keeps one penalty meaningful for all rows
    row_norm = np.sqrt(np.sum(A**2, axis=1))
    d = np.where(row_norm > 0, 1.0 / np.maximum(row_norm, 1e-300), 1.0)
    As, ls, us = A * d[:, None], l * d, u * d

    sigma = 1e-6
    rho0 = 0.1 * float(np.mean(np.diag(P)))
    alpha = 1.6

    def factor(rho_vec):
        M = P + sigma * np.eye(n) + As.T @ (rho_vec[:, None] * As)
        return cho_factor(M, lower=True, check_finite=False)

    rho = rho0
    rho_vec = np.where(is_eq, 1e3 * rho, rho)
    fac = factor(rho_vec)
    z = np.zeros(n)
    s = np.clip(As @ z, ls, us)
    y = np.zeros(m)
    y_check = y.copy()
    it = 0
    prim = dual = np.inf
    for it in range(1, max_iter + 1):
        zt = cho_solve(fac, sigma * z - q + As.T @ (rho_vec * s - y), check_finite=False)
        st = As @ zt
        z = alpha * zt + (1 - alpha) * z
        s_rel = alpha * st + (1 - alpha) * s
        s_new = np.clip(s_rel + y / rho_vec, ls, us)
        y = y + rho_vec * (s_rel - s_new)
        s = s_new
        if it % check_every == 0:
            dy = y - y_check
            y_check = y.copy()
            if _certifies_infeasible(As, ls, us, dy):
                raise QPInfeasibleError("QP is primal infeasible", certificate=dy * d)
            y_orig = y * d
            prim, dual = _kkt_residuals(P, q, A, l, u, z, y_orig)
            if polish and it % (4 * check_every) == 0:
                state = np.zeros(m, dtype=np.int8)
                scale = 1e-6 * (1.0 + np.abs(us).max(initial=0.0))
                state[(us - s < scale) & (y > 0)] = 1
                state[(s - ls < scale) & (y < 0)] = -1
                state[is_eq] = 1
                pol = _polish(P, q, A, l, u, state, tol * 1e-2)
                if pol is not None:
                    zp, yp = pol
                    pp, dp = _kkt_residuals(P, q, A, l, u, zp, yp)
                    if pp <= tol and dp <= tol:
                        return QPResult(zp, yp, float(0.5 * zp @ P @ zp + q @ zp), pp, dp, it, True)
            if prim <= tol and dual <= tol:
                break
            # adapt the penalty toward balancing the two residual scales
            Az = As @ z
            pn = np.max(np.abs(Az - s), initial=0.0) / max(np.max(np.abs(Az)), np.max(np.abs(s)), 1e-12)
            dn = np.max(np.abs(P @ z + q + As.T @ y), initial=0.0) / max(
                np.max(np.abs(P @ z)), np.max(np.abs(As.T @ y)), np.max(np.abs(q)), 1e-12)
            ratio = np.sqrt(pn / max(dn, 1e-30))
            if ratio > 5.0 or ratio < 0.2:
                rho = float(np.clip(rho * ratio, 1e-6, 1e6))
                rho_vec = np.where(is_eq, 1e3 * rho, rho)
                fac = factor(rho_vec)
    y_orig = y * d
    prim, dual = _kkt_residuals(P, q, A, l, u, z, y_orig)
    if prim <= tol and dual <= tol:
        return QPResult(z, y_orig, float(0.5 * z @ P @ z + q @ z), prim, dual, it, False)
    raise SolverError(
        f"QP not solved to {tol:g} in {max_iter} iterations (primal {prim:.2e}, dual {dual:.2e})",
        best=z, residual=max(prim, dual),
    )
