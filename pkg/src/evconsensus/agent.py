"""
One EV agent of the dual-consensus ADMM.

Each agent keeps a local copy ``lam`` of the network dual, a consensus
multiplier ``nu`` and its primal ``u = (x, s)``.  Per active round it runs

    nu   <- nu + rho * sum_m (lam - lam_m)
    u    <- argmin f(u) + rho/(4|N_n|) * || (xi u - w/N)/rho - nu/rho
                                          + sum_m (lam + lam_m) ||^2
    lam  <- ( sum_m (lam + lam_m) - nu/rho + (xi u - w/N)/rho ) / (2|N_n|)

where ``lam_m`` is the freshest value received from neighbor m (stale
values are reused in the u- and lambda-updates when a message is lost).  Only ``lam`` and an iteration
stamp ever leave the agent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import localqp
from .commnet import Message
from .errors import ConfigurationError
from .fleet import BatteryPolytope, EvSpec

PROXIMAL_FORMS = ("printed", "unscaled")


@dataclass
class AgentState:
    lam: np.ndarray
    nu: np.ndarray
    u: np.ndarray
    neighbor_cache: dict = field(default_factory=dict)  # m -> (lam_m, stamp)
    stamp: int = 0

    def copy(self) -> "AgentState":
        return AgentState(
            self.lam.copy(), self.nu.copy(), self.u.copy(),
            {m: (v.copy(), s) for m, (v, s) in self.neighbor_cache.items()}, self.stamp,
        )


class Agent:
    """ADMM worker for customer ``index``.

    Parameters
    ----------
    index : int
    neighbors : sequence of int
        Communication neighbors; must be non-empty.
    spec, polytope : EvSpec, BatteryPolytope
    gamma : ndarray
        This customer's coupling map (rows x T).
    w : ndarray
        Shared coupling headroom.
    n_agents : int
    price : ndarray
        Price per step [$/kWh].
    step_hours : float
    rho : float
        ADMM penalty.
    proximal_form : {"printed", "unscaled"}
        ``"unscaled"`` drops the 1/rho factors inside the proximal norm; it
        exists only to compare against the printed form.
    count_stale : bool
        If False (default) only neighbors heard from this round contribute
        to the nu-update, so each edge's share of nu moves antisymmetrically
        and sum_n nu_n stays zero.  If True the nu-update also sums cached
        values of lost messages; sum_n nu_n then drifts under failures.
        The u- and lambda-updates always use the cache.
    """

    def __init__(self, index, neighbors, spec: EvSpec, polytope: BatteryPolytope, gamma, w,
                 n_agents: int, price, step_hours: float, rho: float = 1.0,
                 proximal_form: str = "printed", count_stale: bool = False, qp_tol: float = 1e-8):
        self.index = index
        self.neighbors = tuple(neighbors)
        if not self.neighbors:
            raise ConfigurationError(f"agent {index} has no neighbors")
        if rho <= 0:
            raise ConfigurationError("rho must be positive")
        if proximal_form not in PROXIMAL_FORMS:
            raise ConfigurationError(f"proximal_form must be one of {PROXIMAL_FORMS}")
        self.spec = spec
        self.polytope = polytope
        self.gamma = np.asarray(gamma, dtype=float)
        self.w = np.asarray(w, dtype=float)
        self.n_agents = n_agents
        self.lin = step_hours * np.asarray(price, dtype=float)
        self.rho = float(rho)
        self.proximal_form = proximal_form
        self.count_stale = count_stale
        self.qp_tol = qp_tol
        m, T = self.gamma.shape
        self.state = AgentState(
            lam=np.zeros(m), nu=np.zeros(m), u=np.zeros(T + m),
            neighbor_cache={j: (np.zeros(m), 0) for j in self.neighbors},
        )
        self._warm = None
        self._fresh: set = set()

    @property
    def degree(self) -> int:
        return len(self.neighbors)

    @property
    def x(self) -> np.ndarray:
        return self.state.u[: self.gamma.shape[1]]

    @property
    def s(self) -> np.ndarray:
        return self.state.u[self.gamma.shape[1]:]

    def _neighbor_sum(self) -> np.ndarray:
        return sum(self.state.neighbor_cache[j][0] for j in self.neighbors)

    def dual_step(self, received: dict) -> np.ndarray:
        """Absorb this round's messages and update ``nu``."""
        st = self.state
        self._fresh = set()
        for j, msg in received.items():
            if j not in st.neighbor_cache:
                continue
            old_stamp = st.neighbor_cache[j][1]
            if msg.stamp >= old_stamp:
                st.neighbor_cache[j] = (np.asarray(msg.lam, dtype=float), msg.stamp)
            self._fresh.add(j)
        if self.count_stale:
            used = self.neighbors
        else:
            used = [j for j in self.neighbors if j in self._fresh]
        if used:
            diff = len(used) * st.lam - sum(st.neighbor_cache[j][0] for j in used)
            st.nu = st.nu + self.rho * diff
        return st.nu

    def local_problem(self) -> localqp.LocalQP:
        st = self.state
        deg, rho, N = self.degree, self.rho, self.n_agents
        pair_sum = deg * st.lam + self._neighbor_sum()
        if self.proximal_form == "printed":
            weight = 1.0 / (4.0 * rho * deg)
            center = self.w / N + st.nu - rho * pair_sum
        else:
            weight = rho / (4.0 * deg)
            center = self.w / N + st.nu - pair_sum
        return localqp.LocalQP(self.polytope, self.spec.kappa, self.lin, self.gamma, weight, center)

    def primal_step(self) -> np.ndarray:
        qp = self.local_problem()
        sol = localqp.solve(qp, warm_start=self._warm, tol=self.qp_tol)
        self._warm = sol
        self.state.u = sol.u
        return self.state.u

    def lambda_step(self) -> np.ndarray:
        st = self.state
        deg, rho, N = self.degree, self.rho, self.n_agents
        xi_u = self.gamma @ self.x + self.s
        pair_sum = deg * st.lam + self._neighbor_sum()
        st.lam = (pair_sum - st.nu / rho + xi_u / rho - self.w / (N * rho)) / (2.0 * deg)
        st.stamp += 1
        return st.lam

    def freeze(self) -> None:
        """Inactive round: keep nu, u and lam."""
        self.state.stamp += 1

    def broadcast(self) -> Message:
        return Message(self.state.lam.copy(), self.state.stamp)

    def step(self, received: dict) -> None:
        self.dual_step(received)
        self.primal_step()
        self.lambda_step()
