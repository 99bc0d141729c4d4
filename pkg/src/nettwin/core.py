"""Network domain model: links, queues, flows, routing and their index functions.

Samples serialize to JSON-Lines, one network per line, with top-level keys
``nodes``, ``links``, ``queues``, ``flows`` and (optionally) ``labels``.
All cross-references are dense 0-based integer ids.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Optional


class NettwinError(Exception):
    """Base class for all package errors."""


class DomainError(NettwinError):
    """Reference to an unknown entity (bad queue/link/flow id)."""


class ValidationError(NettwinError):
    """A sample failed structural validation."""


class ConfigError(NettwinError):
    """Invalid configuration value."""


class NumericError(NettwinError):
    """Non-finite value produced where a finite one is required."""


class GenerationError(NettwinError):
    """Topology generation could not complete."""


class CalibrationError(NettwinError):
    """Traffic-intensity calibration could not reach its target."""


class RoutingError(NettwinError):
    """No route exists between a flow's endpoints."""


class AugmentationError(NettwinError):
    """A link capacity admits no valid (c_ref, s_f) factorization."""


class UnsupportedPolicyError(NettwinError):
    """Operation requires FIFO scheduling but the sample uses something else."""


class CheckpointMismatchError(ConfigError):
    """Checkpoint metadata is inconsistent with the data it is applied to."""


class SchedPolicy(Enum):
    FIFO = "FIFO"
    SP = "SP"
    WFQ = "WFQ"
    DRR = "DRR"


class TrafficModel(Enum):
    POISSON = "POISSON"
    ON_OFF = "ON_OFF"


class PktSizeDist(Enum):
    EXPONENTIAL = "EXPONENTIAL"
    FIXED = "FIXED"


@dataclass(frozen=True)
class CapacityFactor:
    """Link capacity expressed as reference capacity times a scale factor.

    Both factors stay inside the numeric ranges seen in training even when
    their product (the effective capacity) does not; this is the
    scale-independence mechanism.
    """

    c_ref: float  # bits/second
    s_f: float  # dimensionless

    @property
    def effective(self) -> float:
        """Effective capacity in bits/second."""
        return self.c_ref * self.s_f


@dataclass
class Link:
    id: int
    src_node: int
    dst_node: int
    capacity: CapacityFactor
    sched_policy: SchedPolicy = SchedPolicy.FIFO
    queue_ids: list[int] = field(default_factory=list)


@dataclass
class Queue:
    id: int
    link_id: int
    buffer_size: float  # bits
    priority: int = 0
    weight: float = 0.0  # only meaningful for WFQ/DRR


@dataclass
class TrafficDescriptor:
    model: TrafficModel
    avg_rate: float  # bits/second
    avg_pkt_size: float  # bits
    pkt_size_dist: PktSizeDist = PktSizeDist.EXPONENTIAL
    mean_on: float = 0.0  # seconds, ON_OFF only
    mean_off: float = 0.0  # seconds, ON_OFF only


@dataclass
class Flow:
    id: int
    src_node: int
    dst_node: int
    path: list[tuple[int, int]]  # ordered (queue_id, link_id) hops
    traffic: TrafficDescriptor


@dataclass
class NetworkSample:
    """A network state snapshot: topology + queues + flows + routing + traffic.

    Treated as immutable after construction; transformations return new samples.
    """

    nodes: int
    links: list[Link]
    queues: list[Queue]
    flows: list[Flow]


@dataclass
class PerformanceLabels:
    """Simulator ground truth: per-flow delay stats and per-queue occupancy."""

    mean_delay: list[float]  # seconds, one per flow
    jitter: list[float]  # delay variance, seconds^2 proxy, one per flow
    loss_ratio: list[float]  # in [0, 1], one per flow
    mean_occupancy: list[float]  # in [0, 1], one per queue


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, msg: str) -> None:
        self.violations.append(msg)


def flows_through_queue(sample: NetworkSample, queue_id: int) -> list[tuple[int, int]]:
    """Return every (flow_id, hop_index) whose path hop references queue_id.

    Results are in ascending flow id order (and hop order within a flow).
    """
    if not 0 <= queue_id < len(sample.queues):
        raise DomainError(f"unknown queue id {queue_id}")
    out = []
    for flow in sample.flows:
        for j, (qid, _lid) in enumerate(flow.path):
            if qid == queue_id:
                out.append((flow.id, j))
    return out


def queues_of_link(sample: NetworkSample, link_id: int) -> list[int]:
    """Return the link's queue ids ordered by (priority ascending, id ascending)."""
    if not 0 <= link_id < len(sample.links):
        raise DomainError(f"unknown link id {link_id}")
    qids = sample.links[link_id].queue_ids
    return sorted(qids, key=lambda q: (sample.queues[q].priority, q))


def validate_sample(sample: NetworkSample) -> ValidationReport:
    """Check every structural invariant; returns a report, never raises."""
    rep = ValidationReport()
    n_links = len(sample.links)
    n_queues = len(sample.queues)

    if sample.nodes < 1:
        rep.add(f"node count {sample.nodes} < 1")

    owned_by: dict[int, int] = {}
    for i, link in enumerate(sample.links):
        if link.id != i:
            rep.add(f"link {i}: id field is {link.id}, expected dense index {i}")
        for label, node in (("src", link.src_node), ("dst", link.dst_node)):
            if not 0 <= node < sample.nodes:
                rep.add(f"link {i}: {label} node {node} out of range")
        if link.src_node == link.dst_node:
            rep.add(f"link {i}: self-loop at node {link.src_node}")
        if link.capacity.c_ref <= 0 or link.capacity.s_f <= 0:
            rep.add(f"link {i}: non-positive capacity factors "
                    f"({link.capacity.c_ref}, {link.capacity.s_f})")
        if not link.queue_ids:
            rep.add(f"link {i}: empty queue list")
        if link.sched_policy is SchedPolicy.FIFO and len(link.queue_ids) != 1:
            rep.add(f"link {i}: FIFO link must have exactly one queue, "
                    f"has {len(link.queue_ids)}")
        seen = set()
        for qid in link.queue_ids:
            if not 0 <= qid < n_queues:
                rep.add(f"link {i}: queue id {qid} out of range")
                continue
            if qid in seen:
                rep.add(f"link {i}: queue id {qid} listed twice")
            seen.add(qid)
            if qid in owned_by:
                rep.add(f"queue {qid}: owned by links {owned_by[qid]} and {i}")
            owned_by[qid] = i

    directed = set()
    for link in sample.links:
        pair = (link.src_node, link.dst_node)
        if pair in directed:
            rep.add(f"duplicate link {pair[0]}->{pair[1]}")
        directed.add(pair)

    for i, queue in enumerate(sample.queues):
        if queue.id != i:
            rep.add(f"queue {i}: id field is {queue.id}, expected dense index {i}")
        if queue.buffer_size <= 0:
            rep.add(f"queue {i}: buffer size {queue.buffer_size} must be positive")
        if not 0 <= queue.link_id < n_links:
            rep.add(f"queue {i}: link id {queue.link_id} out of range")
        elif queue.id not in sample.links[queue.link_id].queue_ids:
            rep.add(f"queue {i}: link {queue.link_id} does not list it")
        if queue.priority < 0:
            rep.add(f"queue {i}: negative priority {queue.priority}")

    for i, flow in enumerate(sample.flows):
        if flow.id != i:
            rep.add(f"flow {i}: id field is {flow.id}, expected dense index {i}")
        t = flow.traffic
        if t.avg_rate <= 0:
            rep.add(f"flow {i}: average rate {t.avg_rate} must be positive")
        if t.avg_pkt_size <= 0:
            rep.add(f"flow {i}: average packet size {t.avg_pkt_size} must be positive")
        if t.model is TrafficModel.ON_OFF and (t.mean_on <= 0 or t.mean_off <= 0):
            rep.add(f"flow {i}: ON_OFF flow needs positive mean on/off durations")
        if not flow.path:
            rep.add(f"flow {i}: empty path")
            continue
        bad_ref = False
        for j, (qid, lid) in enumerate(flow.path):
            if not 0 <= lid < n_links or not 0 <= qid < n_queues:
                rep.add(f"flow {i} hop {j}: dangling reference (queue {qid}, link {lid})")
                bad_ref = True
                continue
            if qid not in sample.links[lid].queue_ids:
                rep.add(f"flow {i} hop {j}: queue {qid} does not belong to link {lid}")
        if bad_ref:
            continue
        first = sample.links[flow.path[0][1]]
        if first.src_node != flow.src_node:
            rep.add(f"flow {i}: first hop starts at node {first.src_node}, "
                    f"flow source is {flow.src_node}")
        last = sample.links[flow.path[-1][1]]
        if last.dst_node != flow.dst_node:
            rep.add(f"flow {i}: last hop ends at node {last.dst_node}, "
                    f"flow destination is {flow.dst_node}")
        for j in range(1, len(flow.path)):
            prev = sample.links[flow.path[j - 1][1]]
            cur = sample.links[flow.path[j][1]]
            if cur.src_node != prev.dst_node:
                rep.add(f"flow {i}: hop {j} starts at node {cur.src_node} "
                        f"but hop {j - 1} ends at node {prev.dst_node}")
    return rep


def validate_labels(sample: NetworkSample, labels: PerformanceLabels) -> ValidationReport:
    """Range and shape checks for simulator labels against their sample."""
    rep = ValidationReport()
    if len(labels.mean_delay) != len(sample.flows):
        rep.add(f"{len(labels.mean_delay)} delay labels for {len(sample.flows)} flows")
    if len(labels.mean_occupancy) != len(sample.queues):
        rep.add(f"{len(labels.mean_occupancy)} occupancy labels for "
                f"{len(sample.queues)} queues")
    for i, loss in enumerate(labels.loss_ratio):
        if not 0.0 <= loss <= 1.0:
            rep.add(f"flow {i}: loss ratio {loss} outside [0, 1]")
    for i, occ in enumerate(labels.mean_occupancy):
        if not 0.0 <= occ <= 1.0:
            rep.add(f"queue {i}: occupancy {occ} outside [0, 1]")
    return rep


def transmission_time(sample: NetworkSample, flow: Flow) -> float:
    """Seconds to push one average-size packet through every hop of the flow."""
    pkt = flow.traffic.avg_pkt_size
    return sum(pkt / sample.links[lid].capacity.effective for _qid, lid in flow.path)


# ---------------------------------------------------------------------------
# JSON-Lines serialization

SAMPLE_SCHEMA_VERSION = 1


def sample_to_dict(sample: NetworkSample,
                   labels: Optional[PerformanceLabels] = None) -> dict:
    d = {
        "version": SAMPLE_SCHEMA_VERSION,
        "nodes": sample.nodes,
        "links": [
            {
                "id": l.id,
                "src_node": l.src_node,
                "dst_node": l.dst_node,
                "capacity": {"c_ref": l.capacity.c_ref, "s_f": l.capacity.s_f},
                "sched_policy": l.sched_policy.value,
                "queue_ids": list(l.queue_ids),
            }
            for l in sample.links
        ],
        "queues": [
            {
                "id": q.id,
                "link_id": q.link_id,
                "buffer_size": q.buffer_size,
                "priority": q.priority,
                "weight": q.weight,
            }
            for q in sample.queues
        ],
        "flows": [
            {
                "id": f.id,
                "src_node": f.src_node,
                "dst_node": f.dst_node,
                "path": [[qid, lid] for qid, lid in f.path],
                "traffic": {
                    "model": f.traffic.model.value,
                    "avg_rate": f.traffic.avg_rate,
                    "avg_pkt_size": f.traffic.avg_pkt_size,
                    "pkt_size_dist": f.traffic.pkt_size_dist.value,
                    "mean_on": f.traffic.mean_on,
                    "mean_off": f.traffic.mean_off,
                },
            }
            for f in sample.flows
        ],
    }
    if labels is not None:
        d["labels"] = {
            "mean_delay": list(labels.mean_delay),
            "jitter": list(labels.jitter),
            "loss_ratio": list(labels.loss_ratio),
            "mean_occupancy": list(labels.mean_occupancy),
        }
    return d


def sample_from_dict(d: dict) -> tuple[NetworkSample, Optional[PerformanceLabels]]:
    version = d.get("version", SAMPLE_SCHEMA_VERSION)
    if version != SAMPLE_SCHEMA_VERSION:
        raise ValidationError(f"unsupported sample schema version {version}")
    for key in ("nodes", "links", "queues", "flows"):
        if key not in d:
            raise ValidationError(f"sample record missing required key '{key}'")
    try:
        links = [
            Link(
                id=ld["id"],
                src_node=ld["src_node"],
                dst_node=ld["dst_node"],
                capacity=CapacityFactor(ld["capacity"]["c_ref"], ld["capacity"]["s_f"]),
                sched_policy=SchedPolicy(ld["sched_policy"]),
                queue_ids=list(ld["queue_ids"]),
            )
            for ld in d["links"]
        ]
        queues = [
            Queue(
                id=qd["id"],
                link_id=qd["link_id"],
                buffer_size=qd["buffer_size"],
                priority=qd["priority"],
                weight=qd["weight"],
            )
            for qd in d["queues"]
        ]
        flows = [
            Flow(
                id=fd["id"],
                src_node=fd["src_node"],
                dst_node=fd["dst_node"],
                path=[(int(q), int(l)) for q, l in fd["path"]],
                traffic=TrafficDescriptor(
                    model=TrafficModel(fd["traffic"]["model"]),
                    avg_rate=fd["traffic"]["avg_rate"],
                    avg_pkt_size=fd["traffic"]["avg_pkt_size"],
                    pkt_size_dist=PktSizeDist(fd["traffic"]["pkt_size_dist"]),
                    mean_on=fd["traffic"].get("mean_on", 0.0),
                    mean_off=fd["traffic"].get("mean_off", 0.0),
                ),
            )
            for fd in d["flows"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed sample record: {exc}") from exc
    sample = NetworkSample(nodes=d["nodes"], links=links, queues=queues, flows=flows)
    labels = None
    if d.get("labels") is not None:
        ld = d["labels"]
        try:
            labels = PerformanceLabels(
                mean_delay=list(ld["mean_delay"]),
                jitter=list(ld["jitter"]),
                loss_ratio=list(ld["loss_ratio"]),
                mean_occupancy=list(ld["mean_occupancy"]),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed labels record: {exc}") from exc
    return sample, labels


def dump_sample_line(sample: NetworkSample,
                     labels: Optional[PerformanceLabels] = None) -> str:
    return json.dumps(sample_to_dict(sample, labels), sort_keys=True,
                      separators=(",", ":"))


def write_samples_jsonl(path: str,
                        records: Iterable[tuple[NetworkSample, Optional[PerformanceLabels]]],
                        ) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for sample, labels in records:
            fh.write(dump_sample_line(sample, labels))
            fh.write("\n")
            n += 1
    return n


def read_samples_jsonl(path: str) -> list[tuple[NetworkSample, Optional[PerformanceLabels]]]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            out.append(sample_from_dict(d))
    return out


def iter_samples_jsonl(path: str) -> Iterator[tuple[NetworkSample, Optional[PerformanceLabels]]]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            yield sample_from_dict(d)
