"""Discrete-event packet-level simulator producing ground-truth labels.

FIFO service at each queue, tail-drop on byte backlog, zero propagation delay.
Event ties are broken by (time, sequence number) so runs are reproducible
bit-for-bit across platforms. Fidelity is anchored by M/M/1 and M/M/1/K
closed-form oracles in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from heapq import heappush, heappop

import numpy as np

from .core import (
    CalibrationError,
    ConfigError,
    NetworkSample,
    PerformanceLabels,
    PktSizeDist,
    SchedPolicy,
    TrafficModel,
    UnsupportedPolicyError,
    ValidationError,
    transmission_time,
    validate_sample,
)


@dataclass
class SimConfig:
    warmup: float = 10.0  # seconds simulated before measurement starts
    measure: float = 100.0  # measurement window, seconds
    seed: int = 0

    def check(self) -> None:
        if self.warmup < 0:
            raise ConfigError(f"warmup must be >= 0, got {self.warmup}")
        if self.measure <= 0:
            raise ConfigError(f"measure must be > 0, got {self.measure}")


@dataclass
class SimStats:
    """Raw accumulators; packet counts are for packets created in the window."""

    sent: list[int]
    delivered: list[int]
    dropped: list[int]
    delay_sum: list[float]
    delay_sq_sum: list[float]
    occupancy_integral: list[float]  # bit-seconds per queue

    def in_flight(self, flow_id: int) -> int:
        return (self.sent[flow_id] - self.delivered[flow_id]
                - self.dropped[flow_id])


class _Source:
    """Packet arrival process for one flow (Poisson or on-off gated Poisson)."""

    __slots__ = ("rng", "pkt_rate", "size_mean", "fixed_size", "on_rate",
                 "mean_on", "mean_off", "on_end")

    def __init__(self, traffic, rng: np.random.Generator):
        self.rng = rng
        self.pkt_rate = traffic.avg_rate / traffic.avg_pkt_size
        self.size_mean = traffic.avg_pkt_size
        self.fixed_size = traffic.pkt_size_dist is PktSizeDist.FIXED
        if traffic.model is TrafficModel.ON_OFF:
            self.mean_on = traffic.mean_on
            self.mean_off = traffic.mean_off
            duty = self.mean_on / (self.mean_on + self.mean_off)
            self.on_rate = self.pkt_rate / duty
            self.on_end = rng.exponential(self.mean_on)  # starts in an ON period
        else:
            self.on_rate = 0.0
            self.on_end = math.inf

    def next_arrival(self, t: float) -> float:
        if self.on_end is math.inf:
            return t + self.rng.exponential(1.0 / self.pkt_rate)
        while True:
            candidate = t + self.rng.exponential(1.0 / self.on_rate)
            if candidate <= self.on_end:
                return candidate
            t = self.on_end + self.rng.exponential(self.mean_off)
            self.on_end = t + self.rng.exponential(self.mean_on)

    def draw_size(self) -> float:
        if self.fixed_size:
            return self.size_mean
        return self.rng.exponential(self.size_mean)


def simulate_detailed(sample: NetworkSample, cfg: SimConfig,
                      count_admission: dict[int, int] | None = None,
                      ) -> tuple[PerformanceLabels, SimStats]:
    """Run the simulation and return labels plus the raw accumulators.

    count_admission optionally maps queue ids to a max packets-in-system cap;
    those queues admit by packet count instead of byte backlog. This exists so
    fidelity tests can realize textbook count-capped queues (e.g. M/M/1/K)
    exactly; dataset generation never uses it.
    """
    cfg.check()
    report = validate_sample(sample)
    if not report.ok:
        raise ValidationError("sample failed validation: "
                              + "; ".join(report.violations[:5]))
    for link in sample.links:
        if link.sched_policy is not SchedPolicy.FIFO:
            raise UnsupportedPolicyError(
                f"link {link.id} uses {link.sched_policy.value}; only FIFO "
                f"scheduling is simulated")

    n_flows = len(sample.flows)
    n_queues = len(sample.queues)
    warm = cfg.warmup
    horizon = cfg.warmup + cfg.measure

    stats = SimStats(sent=[0] * n_flows, delivered=[0] * n_flows,
                     dropped=[0] * n_flows, delay_sum=[0.0] * n_flows,
                     delay_sq_sum=[0.0] * n_flows,
                     occupancy_integral=[0.0] * n_queues)
    if n_flows == 0:
        return _labels_from_stats(sample, cfg, stats), stats

    # Per-queue state; queue service rate is its owning link's effective capacity.
    cap = [sample.links[q.link_id].capacity.effective for q in sample.queues]
    buf = [q.buffer_size for q in sample.queues]
    count_cap = [None] * n_queues
    if count_admission:
        for qid, k in count_admission.items():
            count_cap[qid] = int(k)
    n_pkts = [0] * n_queues
    backlog = [0.0] * n_queues
    waiting: list[list] = [[] for _ in range(n_queues)]  # FIFO via index cursor
    wait_head = [0] * n_queues
    in_service: list = [None] * n_queues
    occ_int = stats.occupancy_integral
    last_t = [0.0] * n_queues

    hops = [[qid for qid, _lid in f.path] for f in sample.flows]
    sources = [
        _Source(f.traffic,
                np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, f.id])))
        for f in sample.flows
    ]

    heap: list = []
    seq = 0
    for fid, src in enumerate(sources):
        t0 = src.next_arrival(0.0)
        heappush(heap, (t0, seq, 0, fid))
        seq += 1

    sent = stats.sent
    delivered = stats.delivered
    dropped = stats.dropped
    delay_sum = stats.delay_sum
    delay_sq = stats.delay_sq_sum

    def occ_update(q: int, t: float) -> None:
        t0 = last_t[q]
        if t > t0:
            lo = t0 if t0 > warm else warm
            hi = t if t < horizon else horizon
            if hi > lo:
                occ_int[q] += backlog[q] * (hi - lo)
            last_t[q] = t

    def enqueue(q: int, pkt: list, t: float) -> None:
        nonlocal seq
        size = pkt[1]
        if count_cap[q] is not None:
            full = n_pkts[q] >= count_cap[q]
        else:
            full = backlog[q] + size > buf[q]
        if full:
            if pkt[4]:
                dropped[pkt[0]] += 1
            return
        occ_update(q, t)
        backlog[q] += size
        n_pkts[q] += 1
        if in_service[q] is None:
            in_service[q] = pkt
            heappush(heap, (t + size / cap[q], seq, 1, q))
            seq += 1
        else:
            waiting[q].append(pkt)

    while heap:
        t, _s, kind, ident = heap[0]
        if t > horizon:
            break
        heappop(heap)
        if kind == 0:
            fid = ident
            src = sources[fid]
            counted = t >= warm
            if counted:
                sent[fid] += 1
            pkt = [fid, src.draw_size(), t, 0, counted]
            enqueue(hops[fid][0], pkt, t)
            heappush(heap, (src.next_arrival(t), seq, 0, fid))
            seq += 1
        else:
            q = ident
            pkt = in_service[q]
            occ_update(q, t)
            backlog[q] -= pkt[1]
            n_pkts[q] -= 1
            w = waiting[q]
            h = wait_head[q]
            if h < len(w):
                nxt = w[h]
                w[h] = None
                wait_head[q] = h + 1
                if wait_head[q] > 512 and wait_head[q] * 2 > len(w):
                    del w[:wait_head[q]]
                    wait_head[q] = 0
                in_service[q] = nxt
                heappush(heap, (t + nxt[1] / cap[q], seq, 1, q))
                seq += 1
            else:
                in_service[q] = None
            fid = pkt[0]
            hop = pkt[3] + 1
            path = hops[fid]
            if hop == len(path):
                if pkt[4]:
                    d = t - pkt[2]
                    delivered[fid] += 1
                    delay_sum[fid] += d
                    delay_sq[fid] += d * d
            else:
                pkt[3] = hop
                enqueue(path[hop], pkt, t)

    for q in range(n_queues):
        occ_update(q, horizon)

    return _labels_from_stats(sample, cfg, stats), stats


def _labels_from_stats(sample: NetworkSample, cfg: SimConfig,
                       stats: SimStats) -> PerformanceLabels:
    mean_delay = []
    jitter = []
    loss = []
    for f in sample.flows:
        n = stats.delivered[f.id]
        if n > 0:
            mu = stats.delay_sum[f.id] / n
            var = max(0.0, stats.delay_sq_sum[f.id] / n - mu * mu)
        else:
            # No delivered packets in the window: report the no-queueing delay.
            mu = transmission_time(sample, f)
            var = 0.0
        mean_delay.append(mu)
        jitter.append(var)
        s = stats.sent[f.id]
        loss.append(stats.dropped[f.id] / s if s > 0 else 0.0)
    occupancy = [
        min(1.0, stats.occupancy_integral[q.id] / (cfg.measure * q.buffer_size))
        for q in sample.queues
    ]
    return PerformanceLabels(mean_delay=mean_delay, jitter=jitter,
                             loss_ratio=loss, mean_occupancy=occupancy)


def simulate(sample: NetworkSample, cfg: SimConfig) -> PerformanceLabels:
    """Simulate and return labels over the measurement window."""
    labels, _stats = simulate_detailed(sample, cfg)
    return labels


def scale_rates(sample: NetworkSample, factor: float) -> NetworkSample:
    """New sample with every flow's average rate multiplied by factor."""
    flows = [replace(f, traffic=replace(f.traffic,
                                        avg_rate=f.traffic.avg_rate * factor))
             for f in sample.flows]
    return NetworkSample(nodes=sample.nodes, links=sample.links,
                         queues=sample.queues, flows=flows)


def max_flow_loss(sample: NetworkSample, cfg: SimConfig) -> float:
    labels, _ = simulate_detailed(sample, cfg)
    return max(labels.loss_ratio, default=0.0)


FACTOR_BOUNDS = (0.01, 100.0)
LOSS_TOLERANCE = 0.01  # +/- 1 percentage point
MAX_BISECTION_STEPS = 12


def calibrate_intensity(sample: NetworkSample, target_loss: float,
                        cfg: SimConfig,
                        probe_cfg: SimConfig | None = None) -> NetworkSample:
    """Scale all flow rates by a common factor until max per-flow loss hits target.

    Geometric bisection over the factor range, first probe at factor 1, all
    probes sharing one seed (common random numbers keep the loss curve
    monotone in the factor). Probes use probe_cfg when given, typically a
    shorter horizon than the labeling run.
    """
    if not 0.0 < target_loss <= 0.1:
        raise ConfigError(f"target loss must be in (0, 0.1], got {target_loss}")
    if not sample.flows:
        raise CalibrationError("cannot calibrate a sample with no flows")
    probe = probe_cfg if probe_cfg is not None else cfg

    lo, hi = FACTOR_BOUNDS
    best_factor = math.nan
    best_loss = math.nan
    best_gap = math.inf
    for _step in range(MAX_BISECTION_STEPS):
        mid = math.sqrt(lo * hi)
        loss = max_flow_loss(scale_rates(sample, mid), probe)
        gap = abs(loss - target_loss)
        if gap < best_gap:
            best_gap = gap
            best_factor = mid
            best_loss = loss
        if gap <= LOSS_TOLERANCE:
            return scale_rates(sample, mid)
        if loss > target_loss:
            hi = mid
        else:
            lo = mid
    raise CalibrationError(
        f"max per-flow loss did not reach {target_loss:.3f} +/- "
        f"{LOSS_TOLERANCE:.2f} within {MAX_BISECTION_STEPS} steps over factor "
        f"range {FACTOR_BOUNDS}; closest was {best_loss:.4f} at factor "
        f"{best_factor:.3f}")
