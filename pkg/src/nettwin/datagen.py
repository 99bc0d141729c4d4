"""Labeled dataset construction: shortest-path routing, traffic sampling with
loss-targeted calibration, capacity-factorization augmentation, and
train/validation/test splits by topology size.

Labels are simulated once per physical sample and shared by its augmented
variants: augmentation re-expresses the same effective capacity as a different
(c_ref, s_f) pair, so the physical network, and therefore its labels, are
unchanged.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import (
    AugmentationError,
    CapacityFactor,
    ConfigError,
    Flow,
    NettwinError,
    NetworkSample,
    PerformanceLabels,
    PktSizeDist,
    RoutingError,
    TrafficDescriptor,
    TrafficModel,
    dump_sample_line,
    validate_sample,
)
from .model import FeatureScaling
from .simnet import SimConfig, calibrate_intensity, scale_rates, simulate
from .topogen import default_config, generate_topology

logger = logging.getLogger(__name__)

MANIFEST_FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass
class TrafficProfile:
    """Knobs for drawing flow descriptors before calibration."""

    rate_band: tuple[float, float] = (1e6, 4e6)  # bits/s per flow, pre-scaling
    pkt_size_band: tuple[float, float] = (1.5e5, 3.5e5)  # mean bits
    on_off_fraction: float = 0.3
    fixed_size_fraction: float = 0.25
    on_duration_band: tuple[float, float] = (0.2, 1.0)  # seconds
    off_duration_band: tuple[float, float] = (0.2, 1.0)

    def check(self) -> None:
        for name, band in (("rate_band", self.rate_band),
                           ("pkt_size_band", self.pkt_size_band),
                           ("on_duration_band", self.on_duration_band),
                           ("off_duration_band", self.off_duration_band)):
            if band[0] <= 0 or band[1] < band[0]:
                raise ConfigError(f"{name} must be positive and ordered, got {band}")
        if not 0.0 <= self.on_off_fraction <= 1.0:
            raise ConfigError("on_off_fraction must be in [0, 1]")
        if not 0.0 <= self.fixed_size_fraction <= 1.0:
            raise ConfigError("fixed_size_fraction must be in [0, 1]")


@dataclass
class DatasetConfig:
    sizes: dict[str, list[int]] = field(default_factory=lambda: {
        "train": [10, 14, 18], "val": [10, 18], "test": [30, 45, 60]})
    samples_per_size: dict[str, int] = field(default_factory=lambda: {
        "train": 6, "val": 3, "test": 3})
    intensity_range: tuple[float, float] = (0.3, 1.0)
    s_f_range: tuple[float, float] = (1.0, 10.0)
    c_ref_pool: list[float] = field(default_factory=lambda: [
        25e6, 50e6, 100e6, 250e6, 500e6, 1000e6])
    capacity_pools: dict[str, list[float]] = field(default_factory=lambda: {
        "train": [100e6, 250e6, 500e6, 1000e6],
        "val": [100e6, 250e6, 500e6, 1000e6],
        "test": [1000e6, 2500e6, 5000e6, 10000e6]})
    seed: int = 0
    augmentations: dict[str, int] = field(default_factory=lambda: {
        "train": 4, "val": 1, "test": 1})
    max_flows: int = 90
    buffer_pkt_choices: list[int] = field(default_factory=lambda: [8, 16, 32])
    ref_pkt_bits: float = 2.5e5
    target_loss: float = 0.03
    sim_warmup: float = 2.0
    sim_measure: float = 25.0
    probe_warmup: float = 1.0
    probe_measure: float = 8.0
    traffic: TrafficProfile = field(default_factory=TrafficProfile)
    scaling: FeatureScaling = field(default_factory=lambda: FeatureScaling(
        rate_unit=1e6, size_unit=1e5, capacity_unit=1e8))

    def check(self) -> None:
        if self.s_f_range[0] <= 0 or self.s_f_range[1] < self.s_f_range[0]:
            raise ConfigError(f"bad s_f range {self.s_f_range}")
        if not self.c_ref_pool or any(c <= 0 for c in self.c_ref_pool):
            raise ConfigError("c_ref_pool must be non-empty and positive")
        for split in SPLITS:
            if split not in self.sizes or split not in self.samples_per_size:
                raise ConfigError(f"missing split '{split}' in sizes/samples_per_size")
            if any(n < 2 for n in self.sizes[split]):
                raise ConfigError("topology sizes must be >= 2")
            pool = self.capacity_pools.get(split)
            if not pool:
                raise ConfigError(f"missing capacity pool for split '{split}'")
            for cap in pool:
                if not factorization_options(cap, self.s_f_range, self.c_ref_pool):
                    raise ConfigError(
                        f"capacity {cap:g} in split '{split}' has no valid "
                        f"(c_ref, s_f) factorization")
        lo, hi = self.intensity_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"intensity range must be within (0, 1], got "
                              f"{self.intensity_range}")
        if not 0.0 < self.target_loss <= 0.1:
            raise ConfigError(f"target loss must be in (0, 0.1], got "
                              f"{self.target_loss}")
        self.traffic.check()

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "samples_per_size": self.samples_per_size,
            "intensity_range": list(self.intensity_range),
            "s_f_range": list(self.s_f_range),
            "c_ref_pool": self.c_ref_pool,
            "capacity_pools": self.capacity_pools,
            "seed": self.seed,
            "augmentations": self.augmentations,
            "max_flows": self.max_flows,
            "buffer_pkt_choices": self.buffer_pkt_choices,
            "ref_pkt_bits": self.ref_pkt_bits,
            "target_loss": self.target_loss,
            "sim_warmup": self.sim_warmup,
            "sim_measure": self.sim_measure,
            "probe_warmup": self.probe_warmup,
            "probe_measure": self.probe_measure,
            "traffic": {
                "rate_band": list(self.traffic.rate_band),
                "pkt_size_band": list(self.traffic.pkt_size_band),
                "on_off_fraction": self.traffic.on_off_fraction,
                "fixed_size_fraction": self.traffic.fixed_size_fraction,
                "on_duration_band": list(self.traffic.on_duration_band),
                "off_duration_band": list(self.traffic.off_duration_band),
            },
            "scaling": self.scaling.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "DatasetConfig":
        cfg = DatasetConfig()
        simple = {"seed", "max_flows", "ref_pkt_bits", "target_loss",
                  "sim_warmup", "sim_measure", "probe_warmup", "probe_measure",
                  "c_ref_pool", "buffer_pkt_choices"}
        for key, value in d.items():
            if key in simple:
                setattr(cfg, key, value)
            elif key in ("sizes", "samples_per_size", "capacity_pools",
                         "augmentations"):
                merged = dict(getattr(cfg, key))
                merged.update(value)
                setattr(cfg, key, merged)
            elif key in ("intensity_range", "s_f_range"):
                setattr(cfg, key, tuple(value))
            elif key == "traffic":
                t = TrafficProfile()
                for tk, tv in value.items():
                    setattr(t, tk, tuple(tv) if isinstance(tv, list) else tv)
                cfg.traffic = t
            elif key == "scaling":
                cfg.scaling = FeatureScaling.from_dict(value)
            else:
                raise ConfigError(f"unknown dataset config key '{key}'")
        return cfg


# ---------------------------------------------------------------------------
# Routing

def route_shortest_paths(sample: NetworkSample,
                         endpoints: list[tuple[int, int]],
                         ) -> list[list[tuple[int, int]]]:
    """Minimum-hop directed path per (src, dst) pair, ties broken by smallest
    next-node id; hop queues are each link's single FIFO queue."""
    adj: list[list[int]] = [[] for _ in range(sample.nodes)]
    radj: list[list[int]] = [[] for _ in range(sample.nodes)]
    link_at: dict[tuple[int, int], int] = {}
    for l in sample.links:
        adj[l.src_node].append(l.dst_node)
        radj[l.dst_node].append(l.src_node)
        link_at[(l.src_node, l.dst_node)] = l.id
    for row in adj:
        row.sort()

    dist_cache: dict[int, list[int]] = {}

    def dist_to(dst: int) -> list[int]:
        cached = dist_cache.get(dst)
        if cached is not None:
            return cached
        dist = [-1] * sample.nodes
        dist[dst] = 0
        dq = deque([dst])
        while dq:
            v = dq.popleft()
            for u in radj[v]:
                if dist[u] < 0:
                    dist[u] = dist[v] + 1
                    dq.append(u)
        dist_cache[dst] = dist
        return dist

    paths = []
    for src, dst in endpoints:
        dist = dist_to(dst)
        if dist[src] < 0:
            raise RoutingError(f"no directed route from {src} to {dst}")
        path = []
        u = src
        while u != dst:
            nxt = next(v for v in adj[u] if dist[v] == dist[u] - 1)
            lid = link_at[(u, nxt)]
            path.append((sample.links[lid].queue_ids[0], lid))
            u = nxt
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Capacity factorization

def factorization_options(capacity: float, s_f_range: tuple[float, float],
                          c_ref_pool: list[float],
                          rel_tol: float = 1e-9) -> list[float]:
    """c_ref pool entries whose implied s_f = capacity / c_ref is in range."""
    lo, hi = s_f_range
    out = []
    for c in c_ref_pool:
        s = capacity / c
        if lo * (1 - rel_tol) <= s <= hi * (1 + rel_tol):
            out.append(c)
    return out


def augment_capacity(sample: NetworkSample, s_f_range: tuple[float, float],
                     c_ref_pool: list[float], seed: int) -> NetworkSample:
    """Replace each link's (c_ref, s_f) with a uniformly chosen valid
    factorization of the same effective capacity; labels stay valid because
    the physical network is unchanged."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA06]))
    links = []
    for l in sample.links:
        capacity = l.capacity.effective
        options = factorization_options(capacity, s_f_range, c_ref_pool)
        if not options:
            raise AugmentationError(
                f"link {l.id}: capacity {capacity:g} bits/s has no (c_ref, s_f) "
                f"factorization with pool {c_ref_pool} and s_f in {s_f_range}")
        c_ref = options[rng.integers(len(options))]
        links.append(replace(l, capacity=CapacityFactor(c_ref, capacity / c_ref)))
    return NetworkSample(nodes=sample.nodes, links=links, queues=sample.queues,
                         flows=sample.flows)


def assign_capacities_by_load(sample: NetworkSample,
                              paths: list[list[tuple[int, int]]],
                              pool: list[float]) -> NetworkSample:
    """Bucket links into the capacity pool by how many flows they carry:
    heavier-loaded (core) links get the larger pool capacities."""
    counts = np.zeros(len(sample.links), dtype=np.intp)
    for path in paths:
        for _qid, lid in path:
            counts[lid] += 1
    order = sorted(range(len(sample.links)), key=lambda l: (counts[l], l))
    pool_sorted = sorted(pool)
    links = list(sample.links)
    n = len(links)
    for rank, lid in enumerate(order):
        idx = min(len(pool_sorted) - 1, rank * len(pool_sorted) // max(1, n))
        links[lid] = replace(links[lid],
                             capacity=CapacityFactor(pool_sorted[idx], 1.0))
    return NetworkSample(nodes=sample.nodes, links=links, queues=sample.queues,
                         flows=sample.flows)


# ---------------------------------------------------------------------------
# Traffic

def sample_traffic(skeleton: NetworkSample,
                   endpoint_paths: list[tuple[tuple[int, int], list]],
                   intensity: float, seed: int, profile: TrafficProfile,
                   target_loss: float,
                   probe_cfg: SimConfig) -> tuple[NetworkSample, float]:
    """Draw per-flow descriptors, calibrate the whole sample to the loss
    target, then scale down to the requested fraction of that calibrated
    maximum. Returns (sample, calibration factor)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7AF]))
    flows = []
    for fid, ((src, dst), path) in enumerate(endpoint_paths):
        on_off = rng.uniform() < profile.on_off_fraction
        fixed = rng.uniform() < profile.fixed_size_fraction
        traffic = TrafficDescriptor(
            model=TrafficModel.ON_OFF if on_off else TrafficModel.POISSON,
            avg_rate=float(rng.uniform(*profile.rate_band)),
            avg_pkt_size=float(rng.uniform(*profile.pkt_size_band)),
            pkt_size_dist=PktSizeDist.FIXED if fixed else PktSizeDist.EXPONENTIAL,
            mean_on=float(rng.uniform(*profile.on_duration_band)) if on_off else 0.0,
            mean_off=float(rng.uniform(*profile.off_duration_band)) if on_off else 0.0,
        )
        flows.append(Flow(id=fid, src_node=src, dst_node=dst, path=path,
                          traffic=traffic))
    routed = NetworkSample(nodes=skeleton.nodes, links=skeleton.links,
                           queues=skeleton.queues, flows=flows)
    calibrated = calibrate_intensity(routed, target_loss, probe_cfg)
    factor = (calibrated.flows[0].traffic.avg_rate
              / routed.flows[0].traffic.avg_rate) if routed.flows else 1.0
    return scale_rates(calibrated, intensity), factor


def select_endpoints(n_nodes: int, max_flows: int,
                     rng: np.random.Generator) -> list[tuple[int, int]]:
    pairs = [(a, b) for a in range(n_nodes) for b in range(n_nodes) if a != b]
    if len(pairs) <= max_flows:
        return pairs
    chosen = rng.choice(len(pairs), size=max_flows, replace=False)
    return [pairs[k] for k in sorted(chosen)]


# ---------------------------------------------------------------------------
# Build pipeline

@dataclass
class SampleRecord:
    split: str
    size: int
    index: int
    n_flows: int
    intensity: float
    calibration_factor: float


def _build_physical_sample(cfg: DatasetConfig, split: str, size: int,
                           index: int) -> tuple[NetworkSample,
                                                PerformanceLabels,
                                                SampleRecord]:
    ss = np.random.SeedSequence([cfg.seed, SPLITS.index(split), size, index])
    topo_seed, pick_seed, traffic_seed, sim_seed, buf_seed = [
        int(s.generate_state(1)[0]) for s in ss.spawn(5)]

    skeleton = generate_topology(default_config(
        size, seed=topo_seed, capacity_pool=cfg.capacity_pools[split]))
    rng = np.random.default_rng(np.random.SeedSequence([pick_seed, 0x5E1]))
    for q in skeleton.queues:
        pkts = cfg.buffer_pkt_choices[rng.integers(len(cfg.buffer_pkt_choices))]
        q.buffer_size = float(pkts) * cfg.ref_pkt_bits
    endpoints = select_endpoints(size, cfg.max_flows, rng)
    paths = route_shortest_paths(skeleton, endpoints)
    skeleton = assign_capacities_by_load(skeleton, paths,
                                         cfg.capacity_pools[split])
    intensity = float(rng.uniform(*cfg.intensity_range))
    probe_cfg = SimConfig(warmup=cfg.probe_warmup, measure=cfg.probe_measure,
                          seed=sim_seed)
    sample, factor = sample_traffic(skeleton, list(zip(endpoints, paths)),
                                    intensity, traffic_seed, cfg.traffic,
                                    cfg.target_loss, probe_cfg)
    rep = validate_sample(sample)
    if not rep.ok:
        raise NettwinError("generated sample failed validation: "
                           + "; ".join(rep.violations[:3]))
    label_cfg = SimConfig(warmup=cfg.sim_warmup, measure=cfg.sim_measure,
                          seed=sim_seed)
    labels = simulate(sample, label_cfg)
    record = SampleRecord(split=split, size=size, index=index,
                          n_flows=len(sample.flows), intensity=intensity,
                          calibration_factor=factor)
    return sample, labels, record


def _emit_variants(cfg: DatasetConfig, split: str, size: int, index: int,
                   sample: NetworkSample, labels: PerformanceLabels) -> list[str]:
    ss = np.random.SeedSequence([cfg.seed, SPLITS.index(split), size, index,
                                 0xAA])
    n_variants = cfg.augmentations.get(split, 1)
    lines = []
    for v, child in enumerate(ss.spawn(n_variants)):
        variant = augment_capacity(sample, cfg.s_f_range, cfg.c_ref_pool,
                                   int(child.generate_state(1)[0]))
        lines.append(dump_sample_line(variant, labels))
    return lines


def _build_job(args) -> tuple[str, int, int, list[str], SampleRecord | None, str]:
    cfg, split, size, index = args
    try:
        sample, labels, record = _build_physical_sample(cfg, split, size, index)
        lines = _emit_variants(cfg, split, size, index, sample, labels)
        return (split, size, index, lines, record, "")
    except NettwinError as exc:
        return (split, size, index, [], None, f"{type(exc).__name__}: {exc}")


def build_dataset(cfg: DatasetConfig, out_dir: str, workers: int = 1) -> dict:
    """Generate, simulate, augment and write all splits; returns the manifest.

    Aborts the build if more than 1% of samples fail a pipeline stage.
    """
    cfg.check()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for split in SPLITS:
        for size in cfg.sizes[split]:
            for index in range(cfg.samples_per_size[split]):
                jobs.append((cfg, split, size, index))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_build_job, jobs))
    else:
        results = [_build_job(j) for j in jobs]

    lines_by_split: dict[str, list[str]] = {s: [] for s in SPLITS}
    records = []
    failures = []
    for split, size, index, lines, record, err in results:
        if err:
            failures.append({"split": split, "size": size, "index": index,
                             "error": err})
            logger.warning("sample %s/%d/%d aborted: %s", split, size, index, err)
            continue
        lines_by_split[split].extend(lines)
        records.append(record.__dict__)
    if len(failures) > max(0.01 * len(jobs), 0):
        raise NettwinError(
            f"{len(failures)} of {len(jobs)} samples aborted (>1%): "
            f"{failures[:3]}")

    for split in SPLITS:
        with open(out / f"{split}.jsonl", "w", encoding="utf-8") as fh:
            for line in lines_by_split[split]:
                fh.write(line)
                fh.write("\n")

    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "config": cfg.to_dict(),
        "scaling": cfg.scaling.to_dict(),
        "counts": {s: len(lines_by_split[s]) for s in SPLITS},
        "physical_samples": records,
        "failures": failures,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest


def load_manifest(data_dir: str) -> dict | None:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        return None
    with open(path, "r", encoding="utf-8") as fh:
        d = json.load(fh)
    if d.get("format_version") != MANIFEST_FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported manifest format version "
                          f"{d.get('format_version')}")
    return d
