import json
from collections import deque

import numpy as np
import pytest

from nettwin.core import (
    AugmentationError,
    CapacityFactor,
    ConfigError,
    RoutingError,
    read_samples_jsonl,
    validate_sample,
)
from nettwin.datagen import (
    DatasetConfig,
    TrafficProfile,
    assign_capacities_by_load,
    augment_capacity,
    build_dataset,
    factorization_options,
    load_manifest,
    route_shortest_paths,
    sample_traffic,
    select_endpoints,
)
from nettwin.simnet import SimConfig, max_flow_loss, simulate
from nettwin.topogen import default_config, generate_topology

from helpers import single_queue_sample


def skeleton(n, seed=0):
    return generate_topology(default_config(n, seed=seed))


def test_route_adjacent_nodes_one_hop():
    s = skeleton(6, seed=1)
    l = s.links[0]
    [path] = route_shortest_paths(s, [(l.src_node, l.dst_node)])
    assert path == [(l.queue_ids[0], l.id)]


def test_route_two_cycle_each_way():
    from nettwin.topogen import TopoGenConfig
    s = generate_topology(TopoGenConfig(2, 0.5, 1.0, [1e6], seed=0))
    paths = route_shortest_paths(s, [(0, 1), (1, 0)])
    assert all(len(p) == 1 for p in paths)


def _bfs_distance(s, src, dst):
    adj = [[] for _ in range(s.nodes)]
    for l in s.links:
        adj[l.src_node].append(l.dst_node)
    dist = {src: 0}
    dq = deque([src])
    while dq:
        u = dq.popleft()
        if u == dst:
            return dist[u]
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                dq.append(v)
    return dist.get(dst)


def test_route_lengths_match_bfs_oracle():
    s = skeleton(25, seed=3)
    rng = np.random.default_rng(0)
    pairs = [(int(a), int(b)) for a, b in
             rng.integers(0, 25, size=(40, 2)) if a != b]
    paths = route_shortest_paths(s, pairs)
    for (src, dst), path in zip(pairs, paths):
        assert len(path) == _bfs_distance(s, src, dst)


def test_route_paths_validate():
    s = skeleton(15, seed=7)
    pairs = select_endpoints(15, 60, np.random.default_rng(1))
    paths = route_shortest_paths(s, pairs)
    for (src, dst), path in zip(pairs, paths):
        assert path
        assert s.links[path[0][1]].src_node == src
        assert s.links[path[-1][1]].dst_node == dst
        for j in range(1, len(path)):
            assert (s.links[path[j][1]].src_node
                    == s.links[path[j - 1][1]].dst_node)


def test_route_unreachable_raises():
    from nettwin.core import Link, NetworkSample, Queue
    caps = CapacityFactor(1e6, 1.0)
    links = [Link(0, 0, 1, caps, queue_ids=[0])]
    queues = [Queue(0, 0, 1000.0)]
    s = NetworkSample(nodes=3, links=links, queues=queues, flows=[])
    with pytest.raises(RoutingError):
        route_shortest_paths(s, [(1, 2)])


def test_route_tiebreak_smallest_next_node():
    from nettwin.core import Link, NetworkSample, Queue
    caps = CapacityFactor(1e6, 1.0)
    # two equal-length routes 0->1->3 and 0->2->3; tie-break picks node 1
    edges = [(0, 1), (0, 2), (1, 3), (2, 3)]
    links = [Link(i, u, v, caps, queue_ids=[i]) for i, (u, v) in enumerate(edges)]
    queues = [Queue(i, i, 1000.0) for i in range(4)]
    s = NetworkSample(nodes=4, links=links, queues=queues, flows=[])
    [path] = route_shortest_paths(s, [(0, 3)])
    assert [lid for _q, lid in path] == [0, 2]


def test_factorization_options_paper_style_example():
    # 1 Gbps with pool {100 Mbps, 1 Gbps} and s_f in [1, 10]
    opts = factorization_options(1e9, (1.0, 10.0), [100e6, 1e9])
    assert opts == [100e6, 1e9]


def test_augment_identity_when_single_option():
    s = single_queue_sample(1e6, 1e3, 5e7, 1e4)
    out = augment_capacity(s, (1.0, 1.0), [5e7], seed=1)
    assert out.links[0].capacity == CapacityFactor(5e7, 1.0)


def test_augment_preserves_effective_capacity():
    s = skeleton(12, seed=5)
    out = augment_capacity(s, (1.0, 10.0), [25e6, 50e6, 100e6, 250e6, 500e6,
                                            1000e6], seed=9)
    for a, b in zip(s.links, out.links):
        assert b.capacity.effective == pytest.approx(a.capacity.effective,
                                                     rel=1e-9)
        assert 1.0 - 1e-9 <= b.capacity.s_f <= 10.0 + 1e-9


def test_augment_uniform_over_factorizations():
    s = single_queue_sample(1e6, 1e3, 1e9, 1e4)  # 1 Gbps link
    pool = [100e6, 1e9]
    hits = {100e6: 0, 1e9: 0}
    for seed in range(1000):
        out = augment_capacity(s, (1.0, 10.0), pool, seed=seed)
        hits[out.links[0].capacity.c_ref] += 1
    assert abs(hits[100e6] / 1000.0 - 0.5) <= 0.05


def test_augment_error_lists_capacity():
    s = single_queue_sample(1e6, 1e3, 3e9, 1e4)  # 3 Gbps, not factorizable
    with pytest.raises(AugmentationError, match="3e\\+09"):
        augment_capacity(s, (1.0, 10.0), [100e6], seed=0)


def test_assign_capacities_by_load_monotone():
    s = skeleton(12, seed=2)
    pairs = select_endpoints(12, 60, np.random.default_rng(3))
    paths = route_shortest_paths(s, pairs)
    pool = [10e6, 20e6, 40e6, 80e6]
    out = assign_capacities_by_load(s, paths, pool)
    counts = np.zeros(len(s.links))
    for p in paths:
        for _q, lid in p:
            counts[lid] += 1
    caps = np.array([l.capacity.effective for l in out.links])
    # heavier links never get smaller capacity than lighter ones
    order = np.argsort(counts, kind="stable")
    assert np.all(np.diff(caps[order]) >= -1e-9)
    assert set(np.unique(caps)) <= set(pool)


def test_sample_traffic_determinism_and_intensity():
    s = skeleton(8, seed=11)
    pairs = select_endpoints(8, 30, np.random.default_rng(0))
    paths = route_shortest_paths(s, pairs)
    for q in s.queues:
        q.buffer_size = 2e6
    s = assign_capacities_by_load(s, paths, [25e6, 50e6])
    probe = SimConfig(warmup=1.0, measure=8.0, seed=5)
    profile = TrafficProfile()
    a, fa = sample_traffic(s, list(zip(pairs, paths)), 0.7, 42, profile, 0.03,
                           probe)
    b, fb = sample_traffic(s, list(zip(pairs, paths)), 0.7, 42, profile, 0.03,
                           probe)
    assert fa == fb
    assert [f.traffic.avg_rate for f in a.flows] == [f.traffic.avg_rate
                                                     for f in b.flows]
    half, _ = sample_traffic(s, list(zip(pairs, paths)), 0.35, 42, profile,
                             0.03, probe)
    for fh, fa_ in zip(half.flows, a.flows):
        assert fh.traffic.avg_rate == pytest.approx(fa_.traffic.avg_rate / 2.0)


def test_low_intensity_low_loss():
    s = skeleton(8, seed=11)
    pairs = select_endpoints(8, 30, np.random.default_rng(0))
    paths = route_shortest_paths(s, pairs)
    for q in s.queues:
        q.buffer_size = 2e6
    s = assign_capacities_by_load(s, paths, [25e6, 50e6])
    probe = SimConfig(warmup=1.0, measure=8.0, seed=5)
    low, _ = sample_traffic(s, list(zip(pairs, paths)), 0.1, 42,
                            TrafficProfile(), 0.03, probe)
    assert max_flow_loss(low, SimConfig(warmup=1.0, measure=15.0, seed=6)) < 0.005


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    cfg = DatasetConfig()
    cfg.sizes = {"train": [8], "val": [8], "test": [14]}
    cfg.samples_per_size = {"train": 2, "val": 1, "test": 1}
    cfg.max_flows = 24
    cfg.sim_measure = 10.0
    cfg.probe_measure = 5.0
    cfg.capacity_pools = {"train": [25e6, 50e6], "val": [25e6, 50e6],
                          "test": [50e6, 125e6]}
    cfg.c_ref_pool = [25e6, 50e6, 125e6]
    manifest = build_dataset(cfg, str(out), workers=1)
    return out, cfg, manifest


def test_build_counts_and_augment_sharing(tiny_dataset):
    out, cfg, manifest = tiny_dataset
    assert manifest["counts"]["train"] == 2 * cfg.augmentations["train"]
    recs = read_samples_jsonl(str(out / "train.jsonl"))
    # variants of one physical sample share labels bit-for-bit
    k = cfg.augmentations["train"]
    first = recs[:k]
    for s, labels in first[1:]:
        assert labels.mean_delay == first[0][1].mean_delay
        assert labels.mean_occupancy == first[0][1].mean_occupancy
    # but differ in capacity representation somewhere
    assert any(
        s.links[0].capacity != first[0][0].links[0].capacity or
        any(a.capacity != b.capacity for a, b in zip(s.links, first[0][0].links))
        for s, _ in first[1:]
    )


def test_build_every_line_validates(tiny_dataset):
    out, cfg, manifest = tiny_dataset
    for split in ("train", "val", "test"):
        for s, labels in read_samples_jsonl(str(out / f"{split}.jsonl")):
            assert validate_sample(s).ok
            assert labels is not None
            assert len(labels.mean_delay) == len(s.flows)


def test_build_determinism(tiny_dataset, tmp_path):
    out, cfg, manifest = tiny_dataset
    build_dataset(cfg, str(tmp_path / "again"), workers=1)
    for split in ("train", "val", "test"):
        a = (out / f"{split}.jsonl").read_bytes()
        b = (tmp_path / "again" / f"{split}.jsonl").read_bytes()
        assert a == b


def test_manifest_roundtrip(tiny_dataset):
    out, cfg, manifest = tiny_dataset
    loaded = load_manifest(str(out))
    assert loaded is not None
    assert loaded["counts"] == manifest["counts"]
    rebuilt = DatasetConfig.from_dict(loaded["config"])
    assert rebuilt.to_dict() == cfg.to_dict()


def test_config_validation():
    cfg = DatasetConfig()
    cfg.capacity_pools["test"] = [3e9]  # not factorizable with default pool
    with pytest.raises(ConfigError):
        cfg.check()
    cfg = DatasetConfig()
    cfg.intensity_range = (0.0, 1.0)
    with pytest.raises(ConfigError):
        cfg.check()
    cfg = DatasetConfig()
    cfg.sizes["train"] = [1]
    with pytest.raises(ConfigError):
        cfg.check()


def test_config_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        DatasetConfig.from_dict({"not_a_knob": 1})
