"""Random power-law topology generation.

Out-degree credits follow a power law (rank-style PLOD: ``ceil(beta * x**-alpha)``
with x uniform in [1, n]); edges land uniformly at random on distinct node
pairs, and the digraph is then repaired to strong connectivity by closing a
cycle over its condensation, so shortest-path routing is defined for every
source-destination pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import networkx as nx
import numpy as np

from .core import (
    CapacityFactor,
    ConfigError,
    GenerationError,
    Link,
    NetworkSample,
    Queue,
    SchedPolicy,
)

# Project constants for drawing default PLOD parameters: alpha uniform in
# ALPHA_RANGE; beta derived from a target mean out-degree drawn uniformly in
# MEAN_DEGREE_RANGE so the mean lands in [2, 6] for 25-300 nodes (a beta range
# proportional to n cannot hold that band across sizes: the credit mean scales
# like beta * n^(-alpha) * n / (1 - alpha)).
ALPHA_RANGE = (0.4, 0.8)
MEAN_DEGREE_RANGE = (2.5, 5.0)

DEFAULT_BUFFER_BITS = 32000.0


def _mean_credit_factor(alpha: float, n: int) -> float:
    """E[x**-alpha] for x uniform in [1, n]."""
    if abs(alpha - 1.0) < 1e-12:
        return math.log(n) / (n - 1)
    return (n ** (1.0 - alpha) - 1.0) / ((1.0 - alpha) * (n - 1))


def beta_for_mean_degree(alpha: float, n: int, mean_degree: float) -> float:
    """Credit scale giving roughly the requested mean out-degree (the ceil in
    the credit draw adds about one half)."""
    return max(0.5, (mean_degree - 0.5) / _mean_credit_factor(alpha, n))


@dataclass
class TopoGenConfig:
    n_nodes: int
    alpha: float  # power-law exponent
    beta: float  # credit scale
    capacity_pool: list[float]  # effective capacities, bits/second
    seed: int
    buffer_size: float = DEFAULT_BUFFER_BITS

    def check(self) -> None:
        if self.n_nodes < 2:
            raise ConfigError(f"n_nodes must be >= 2, got {self.n_nodes}")
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError(f"alpha and beta must be positive, got "
                              f"({self.alpha}, {self.beta})")
        if not self.capacity_pool or any(c <= 0 for c in self.capacity_pool):
            raise ConfigError("capacity_pool must be non-empty and positive")
        if self.buffer_size <= 0:
            raise ConfigError(f"buffer size must be positive, got {self.buffer_size}")


def default_config(n_nodes: int, seed: int,
                   capacity_pool: list[float] | None = None) -> TopoGenConfig:
    """Draw alpha and a target mean out-degree from the documented project
    ranges, seeded; beta follows from them."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x70B0]))
    alpha = rng.uniform(*ALPHA_RANGE)
    beta = beta_for_mean_degree(alpha, n_nodes, rng.uniform(*MEAN_DEGREE_RANGE))
    if capacity_pool is None:
        capacity_pool = [100e6, 250e6, 500e6, 1000e6]
    return TopoGenConfig(n_nodes=n_nodes, alpha=alpha, beta=beta,
                         capacity_pool=capacity_pool, seed=seed)


def _plod_edges(cfg: TopoGenConfig, rng: np.random.Generator) -> set[tuple[int, int]]:
    n = cfg.n_nodes
    x = rng.uniform(1.0, float(n), size=n)
    credits = np.ceil(cfg.beta * x ** (-cfg.alpha)).astype(int)
    credits = np.minimum(credits, n - 1)
    edges: set[tuple[int, int]] = set()
    for u in range(n):
        others = np.concatenate([np.arange(0, u), np.arange(u + 1, n)])
        targets = rng.choice(others, size=int(credits[u]), replace=False)
        for v in targets:
            edges.add((u, int(v)))
    return edges


def _close_condensation(edges: set[tuple[int, int]], n: int,
                        rng: np.random.Generator) -> None:
    """Add one edge between consecutive SCCs of a random component cycle."""
    g = nx.DiGraph()
    g.add_nodes_from(range(n))
    g.add_edges_from(edges)
    comps = [sorted(c) for c in nx.strongly_connected_components(g)]
    if len(comps) == 1:
        return
    comps.sort(key=lambda c: c[0])
    order = rng.permutation(len(comps))
    for i in range(len(comps)):
        src_comp = comps[order[i]]
        dst_comp = comps[order[(i + 1) % len(comps)]]
        u = int(src_comp[rng.integers(len(src_comp))])
        v = int(dst_comp[rng.integers(len(dst_comp))])
        edges.add((u, v))


def generate_topology(cfg: TopoGenConfig) -> NetworkSample:
    """Build a strongly connected skeleton: nodes + links + one FIFO queue per link.

    Deterministic in the config; links are sorted by (src, dst) before id
    assignment so the same graph always serializes identically.
    """
    cfg.check()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x70B1]))
    edges = _plod_edges(cfg, rng)
    for _attempt in range(4):
        _close_condensation(edges, cfg.n_nodes, rng)
        if _edges_strongly_connected(edges, cfg.n_nodes):
            break
    else:
        raise GenerationError(
            f"could not connect {cfg.n_nodes}-node graph within retry budget")

    pool = np.asarray(cfg.capacity_pool, dtype=float)
    links: list[Link] = []
    queues: list[Queue] = []
    for lid, (u, v) in enumerate(sorted(edges)):
        cap = float(pool[rng.integers(len(pool))])
        links.append(Link(id=lid, src_node=u, dst_node=v,
                          capacity=CapacityFactor(c_ref=cap, s_f=1.0),
                          sched_policy=SchedPolicy.FIFO, queue_ids=[lid]))
        queues.append(Queue(id=lid, link_id=lid, buffer_size=cfg.buffer_size))
    return NetworkSample(nodes=cfg.n_nodes, links=links, queues=queues, flows=[])


def _edges_strongly_connected(edges: set[tuple[int, int]], n: int) -> bool:
    fwd: list[list[int]] = [[] for _ in range(n)]
    rev: list[list[int]] = [[] for _ in range(n)]
    for u, v in edges:
        fwd[u].append(v)
        rev[v].append(u)
    return _reaches_all(fwd, n) and _reaches_all(rev, n)


def _reaches_all(adj: list[list[int]], n: int) -> bool:
    seen = [False] * n
    seen[0] = True
    stack = [0]
    count = 1
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                count += 1
                stack.append(v)
    return count == n


def is_strongly_connected(sample: NetworkSample) -> bool:
    """True iff every node reaches every other over directed links."""
    edges = {(l.src_node, l.dst_node) for l in sample.links}
    if not edges:
        return sample.nodes <= 1
    return _edges_strongly_connected(edges, sample.nodes)
