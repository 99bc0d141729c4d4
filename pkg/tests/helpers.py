"""Shared test fixtures: hand-built samples, an independent BFS router for
constructing fixtures, a permutation harness, and the finite-difference
gradient oracle."""

from __future__ import annotations

from collections import deque

import numpy as np

from nettwin.core import (
    CapacityFactor,
    Flow,
    Link,
    NetworkSample,
    PerformanceLabels,
    PktSizeDist,
    Queue,
    SchedPolicy,
    TrafficDescriptor,
    TrafficModel,
)
from nettwin import topogen


def single_queue_sample(rate_bps: float, pkt_bits: float, cap_bps: float,
                        buffer_bits: float,
                        dist: PktSizeDist = PktSizeDist.EXPONENTIAL) -> NetworkSample:
    link = Link(id=0, src_node=0, dst_node=1,
                capacity=CapacityFactor(cap_bps, 1.0), queue_ids=[0])
    queue = Queue(id=0, link_id=0, buffer_size=buffer_bits)
    traffic = TrafficDescriptor(model=TrafficModel.POISSON, avg_rate=rate_bps,
                                avg_pkt_size=pkt_bits, pkt_size_dist=dist)
    flow = Flow(id=0, src_node=0, dst_node=1, path=[(0, 0)], traffic=traffic)
    return NetworkSample(nodes=2, links=[link], queues=[queue], flows=[flow])


def chain_sample(n_hops: int, rate_bps: float = 2e6, pkt_bits: float = 10e3,
                 cap_bps: float = 10e6, buffer_bits: float = 1e6) -> NetworkSample:
    """A single flow over a directed chain of n_hops links."""
    links, queues, path = [], [], []
    for i in range(n_hops):
        links.append(Link(id=i, src_node=i, dst_node=i + 1,
                          capacity=CapacityFactor(cap_bps, 1.0), queue_ids=[i]))
        queues.append(Queue(id=i, link_id=i, buffer_size=buffer_bits))
        path.append((i, i))
    traffic = TrafficDescriptor(model=TrafficModel.POISSON, avg_rate=rate_bps,
                                avg_pkt_size=pkt_bits)
    flow = Flow(id=0, src_node=0, dst_node=n_hops, path=path, traffic=traffic)
    return NetworkSample(nodes=n_hops + 1, links=links, queues=queues,
                         flows=[flow])


def bfs_route(sample: NetworkSample, src: int, dst: int) -> list[tuple[int, int]]:
    """Min-hop path with smallest-next-node tie break; independent of datagen."""
    adj: dict[int, list[int]] = {}
    link_at: dict[tuple[int, int], int] = {}
    for l in sample.links:
        adj.setdefault(l.src_node, []).append(l.dst_node)
        link_at[(l.src_node, l.dst_node)] = l.id
    dist = {dst: 0}
    dq = deque([dst])
    radj: dict[int, list[int]] = {}
    for l in sample.links:
        radj.setdefault(l.dst_node, []).append(l.src_node)
    while dq:
        v = dq.popleft()
        for u in radj.get(v, []):
            if u not in dist:
                dist[u] = dist[v] + 1
                dq.append(u)
    if src not in dist:
        raise AssertionError(f"no route {src}->{dst}")
    path = []
    u = src
    while u != dst:
        nxt = min(v for v in adj.get(u, []) if dist.get(v, 1 << 30) == dist[u] - 1)
        lid = link_at[(u, nxt)]
        path.append((sample.links[lid].queue_ids[0], lid))
        u = nxt
    return path


def routed_sample(n_nodes: int, seed: int, n_flows: int,
                  rate_bps: float = 2e6, pkt_bits: float = 250e3,
                  buffer_bits: float = 4e6,
                  capacity_pool=(25e6, 50e6, 100e6)) -> NetworkSample:
    """Topology skeleton plus BFS-routed Poisson flows; a generic fixture."""
    cfg = topogen.default_config(n_nodes, seed=seed,
                                 capacity_pool=list(capacity_pool))
    skeleton = topogen.generate_topology(cfg)
    for q in skeleton.queues:
        q.buffer_size = buffer_bits
    rng = np.random.default_rng(seed + 1)
    pairs = [(a, b) for a in range(n_nodes) for b in range(n_nodes) if a != b]
    chosen = rng.choice(len(pairs), size=min(n_flows, len(pairs)), replace=False)
    flows = []
    for i, k in enumerate(sorted(chosen)):
        a, b = pairs[k]
        traffic = TrafficDescriptor(
            model=TrafficModel.POISSON,
            avg_rate=rate_bps * float(rng.uniform(0.5, 1.5)),
            avg_pkt_size=pkt_bits)
        flows.append(Flow(id=i, src_node=a, dst_node=b,
                          path=bfs_route(skeleton, a, b), traffic=traffic))
    return NetworkSample(nodes=skeleton.nodes, links=skeleton.links,
                         queues=skeleton.queues, flows=flows)


def permute_sample(sample: NetworkSample, rng: np.random.Generator):
    """Relabel nodes, links, queues and flows with random permutations.

    Returns (permuted sample, link_perm, queue_perm, flow_perm) where
    perm[old_id] = new_id.
    """
    node_p = rng.permutation(sample.nodes)
    link_p = rng.permutation(len(sample.links))
    queue_p = rng.permutation(len(sample.queues))
    flow_p = rng.permutation(len(sample.flows))

    links = [None] * len(sample.links)
    for l in sample.links:
        links[link_p[l.id]] = Link(
            id=int(link_p[l.id]),
            src_node=int(node_p[l.src_node]),
            dst_node=int(node_p[l.dst_node]),
            capacity=l.capacity,
            sched_policy=l.sched_policy,
            queue_ids=sorted(int(queue_p[q]) for q in l.queue_ids),
        )
    queues = [None] * len(sample.queues)
    for q in sample.queues:
        queues[queue_p[q.id]] = Queue(
            id=int(queue_p[q.id]),
            link_id=int(link_p[q.link_id]),
            buffer_size=q.buffer_size,
            priority=q.priority,
            weight=q.weight,
        )
    flows = [None] * len(sample.flows)
    for f in sample.flows:
        flows[flow_p[f.id]] = Flow(
            id=int(flow_p[f.id]),
            src_node=int(node_p[f.src_node]),
            dst_node=int(node_p[f.dst_node]),
            path=[(int(queue_p[q]), int(link_p[l])) for q, l in f.path],
            traffic=f.traffic,
        )
    permuted = NetworkSample(nodes=sample.nodes, links=links, queues=queues,
                             flows=flows)
    return permuted, link_p, queue_p, flow_p


def permute_labels(labels: PerformanceLabels, queue_p, flow_p) -> PerformanceLabels:
    n_f, n_q = len(labels.mean_delay), len(labels.mean_occupancy)
    delay = [0.0] * n_f
    jit = [0.0] * n_f
    loss = [0.0] * n_f
    occ = [0.0] * n_q
    for i in range(n_f):
        delay[flow_p[i]] = labels.mean_delay[i]
        jit[flow_p[i]] = labels.jitter[i]
        loss[flow_p[i]] = labels.loss_ratio[i]
    for i in range(n_q):
        occ[queue_p[i]] = labels.mean_occupancy[i]
    return PerformanceLabels(delay, jit, loss, occ)


def finite_diff_grads(loss_fn, arrays: dict[str, np.ndarray],
                      eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central finite differences of a re-evaluable scalar loss with respect
    to every entry of the given arrays (perturbed in place)."""
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_fn()
            flat[i] = orig - eps
            lm = loss_fn()
            flat[i] = orig
            gflat[i] = (lp - lm) / (2.0 * eps)
        grads[name] = g
    return grads


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-4) -> float:
    """Max |a-b| / max(|a|, |b|, floor); the floor keeps finite-difference
    noise on near-zero gradients from dominating."""
    num = np.abs(a - b)
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((num / den).max()) if num.size else 0.0


def all_fifo_one_queue(sample: NetworkSample) -> bool:
    return all(l.sched_policy is SchedPolicy.FIFO and len(l.queue_ids) == 1
               for l in sample.links)
