"""
Simulated peer-to-peer network with random agent dropout and link loss.

Each round every agent is active independently with probability
``activity[n]``; every edge draws one Bernoulli success with probability
``1 - link_failure[e]`` and carries messages (both ways) only when that
draw succeeds and both endpoints are active.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Mapping

import networkx as nx
import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class CommGraph:
    n_agents: int
    edges: tuple  # sorted (n, m) pairs with n < m

    def __post_init__(self):
        edges = []
        for n, m in self.edges:
            n, m = int(n), int(m)
            if n == m:
                raise ConfigurationError(f"self-loop at agent {n}")
            if not (0 <= n < self.n_agents and 0 <= m < self.n_agents):
                raise ConfigurationError(f"edge ({n}, {m}) references a missing agent")
            edges.append((min(n, m), max(n, m)))
        edges = tuple(sorted(set(edges)))
        object.__setattr__(self, "edges", edges)
        nbrs = [[] for _ in range(self.n_agents)]
        for n, m in edges:
            nbrs[n].append(m)
            nbrs[m].append(n)
        object.__setattr__(self, "_neighbors", tuple(tuple(sorted(v)) for v in nbrs))
        g = nx.Graph()
        g.add_nodes_from(range(self.n_agents))
        g.add_edges_from(edges)
        if self.n_agents < 2 or not nx.is_connected(g):
            raise ConfigurationError("communication graph must be connected with at least two agents")

    def neighbors(self, n: int) -> tuple:
        return self._neighbors[n]

    def degree(self, n: int) -> int:
        return len(self._neighbors[n])

    @property
    def n_edges(self) -> int:
        return len(self.edges)


def random_connected_graph(n_agents: int, edge_prob: float | None = None, seed: int = 0,
                           max_tries: int = 1000) -> tuple[CommGraph, dict]:
    """Erdos-Renyi graph redrawn until connected.

    The default edge probability is twice the connectivity threshold
    ln(N)/N (capped at 1).  Returns the graph and generator metadata.
    """
    if n_agents < 2:
        raise ConfigurationError("need at least two agents")
    if edge_prob is None:
        edge_prob = min(1.0, 2.0 * math.log(n_agents) / n_agents) if n_agents > 2 else 1.0
    rng = np.random.default_rng(seed)
    for attempt in range(1, max_tries + 1):
        g = nx.gnp_random_graph(n_agents, edge_prob, seed=int(rng.integers(2**31)))
        if nx.is_connected(g):
            meta = {"generator": "erdos_renyi", "edge_prob": edge_prob, "seed": seed, "attempts": attempt}
            return CommGraph(n_agents, tuple(g.edges())), meta
    raise ConfigurationError(f"no connected graph after {max_tries} draws at p={edge_prob}")


def load_edge_list(path, n_agents: int) -> CommGraph:
    with open(path, newline="") as fh:
        edges = [(int(r["source"]), int(r["target"])) for r in csv.DictReader(fh)]
    return CommGraph(n_agents, tuple(edges))


@dataclass(frozen=True)
class FailureModel:
    activity: np.ndarray       # per agent, in (0, 1]
    link_failure: np.ndarray   # per edge (graph.edges order), in [0, 1]
    seed: int = 0

    def __post_init__(self):
        a = np.asarray(self.activity, dtype=float)
        f = np.asarray(self.link_failure, dtype=float)
        if np.any((a <= 0) | (a > 1)):
            raise ConfigurationError("agent activity probabilities must lie in (0, 1]")
        if np.any((f < 0) | (f > 1)):
            raise ConfigurationError("link failure probabilities must lie in [0, 1]")
        object.__setattr__(self, "activity", a)
        object.__setattr__(self, "link_failure", f)

    @classmethod
    def uniform(cls, graph: CommGraph, alpha_hat: float = 1.0, alpha_bar: float = 0.0, seed: int = 0):
        return cls(np.full(graph.n_agents, alpha_hat), np.full(graph.n_edges, alpha_bar), seed)


@dataclass(frozen=True)
class RoundSample:
    tau: int
    active_agents: np.ndarray  # bool per agent
    active_links: np.ndarray   # bool per edge


def sample_round(graph: CommGraph, model: FailureModel, tau: int) -> RoundSample:
    """Draw the active agents and links of round ``tau``.

    The draw is a pure function of ``(model.seed, tau)``, so any round can be
    replayed independently of the others.
    """
    rng = np.random.default_rng([model.seed, tau])
    agents = rng.random(graph.n_agents) < model.activity
    link_ok = rng.random(graph.n_edges) >= model.link_failure
    ends = np.array(graph.edges, dtype=int).reshape(-1, 2)
    links = link_ok & agents[ends[:, 0]] & agents[ends[:, 1]]
    return RoundSample(tau, agents, links)


@dataclass(frozen=True)
class Message:
    """The only thing that crosses a link: a dual vector and its iteration stamp."""

    lam: np.ndarray
    stamp: int


class MessageBus:
    """Delivers broadcasts over the links that are up this round.

    ``observers`` are called as ``observer(sender, receiver, message)`` for
    every delivered message.
    """

    def __init__(self, graph: CommGraph, observers: list[Callable] | None = None):
        self.graph = graph
        self.observers = list(observers or [])

    def deliver(self, sample: RoundSample, payloads: Mapping[int, Message]) -> dict[int, dict[int, Message]]:
        inbox: dict[int, dict[int, Message]] = {n: {} for n in range(self.graph.n_agents)}
        for e, (n, m) in enumerate(self.graph.edges):
            if not sample.active_links[e]:
                continue
            for src, dst in ((m, n), (n, m)):
                msg = payloads.get(src)
                if msg is None:
                    continue
                for obs in self.observers:
                    obs(src, dst, msg)
                inbox[dst][src] = msg
        return inbox


def deliver(graph: CommGraph, sample: RoundSample, payloads: Mapping[int, Message]):
    return MessageBus(graph).deliver(sample, payloads)
