"""Three-stage message-passing model over flows, queues and links, with the
occupancy readout and the physical delay reconstruction.

Hidden states are feature vectors zero-padded to the hidden width. Each
iteration: flows scan their (queue, link) hops with a GRU, leaving one message
per hop; queues sum incoming messages and update; links scan their queues in
(priority, id) order. After the final iteration a sigmoid MLP reads occupancy
per queue, and flow delay is rebuilt as predicted backlog divided by drain
rate plus per-hop transmission time, so the prediction target stays in [0, 1]
no matter how large the network's capacities are.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffmath as dm
from .core import (
    ConfigError,
    NetworkSample,
    NumericError,
    SchedPolicy,
    TrafficModel,
    ValidationError,
    queues_of_link,
)
from .diffmath import GruParams, MlpParams, Tape, Tensor

N_POLICIES = 4
PRIORITY_LEVELS = 3
N_TRAFFIC_MODELS = 2
_POLICY_INDEX = {p: i for i, p in enumerate(SchedPolicy)}
_TRAFFIC_INDEX = {m: i for i, m in enumerate(TrafficModel)}
CHECKPOINT_FORMAT_VERSION = 1

CAPACITY_FACTORED = "factored"
CAPACITY_RAW = "raw"


@dataclass(frozen=True)
class FeatureScaling:
    """Fixed units dividing raw magnitudes so features are O(1); chosen at
    dataset-creation time and stored with the checkpoint."""

    rate_unit: float = 1e6  # bits/second
    size_unit: float = 1e3  # bits (packet sizes and buffers)
    capacity_unit: float = 1e6  # bits/second (c_ref / raw capacity)

    def to_dict(self) -> dict:
        return {"rate_unit": self.rate_unit, "size_unit": self.size_unit,
                "capacity_unit": self.capacity_unit}

    @staticmethod
    def from_dict(d: dict) -> "FeatureScaling":
        return FeatureScaling(rate_unit=d["rate_unit"], size_unit=d["size_unit"],
                              capacity_unit=d["capacity_unit"])


@dataclass
class ModelParams:
    """All trainable weights plus the hyperparameters that shape them."""

    flow_cell: GruParams  # input 2*hidden -> hidden
    queue_cell: GruParams  # input hidden -> hidden
    link_cell: GruParams  # input hidden -> hidden
    occupancy_head: MlpParams  # hidden -> hidden -> 1, sigmoid
    flow_head: MlpParams  # hidden -> hidden -> 1, identity (reserved head)
    hidden_dim: int = 32
    iterations: int = 8
    chunk_len: int = 32  # max hops per RNN sub-sequence in the flow scan
    capacity_mode: str = CAPACITY_FACTORED
    scaling: FeatureScaling = field(default_factory=FeatureScaling)
    delay_scale: float = 1.0  # delay normalization used by the training loss


@dataclass
class HiddenStates:
    flows: Tensor
    queues: Tensor
    links: Tensor


@dataclass
class ForwardResult:
    occupancy: Tensor  # (n_queues,), each in (0, 1)
    flow_head_out: Tensor  # (n_flows,), raw auxiliary head
    tape: Tape
    bound: ModelParams  # tensor-valued params; leaves carry gradients


def link_feature_dim(capacity_mode: str) -> int:
    return 2 + N_POLICIES if capacity_mode == CAPACITY_FACTORED else 1 + N_POLICIES


def init_params(seed: int, hidden_dim: int = 32, iterations: int = 8,
                chunk_len: int = 32, capacity_mode: str = CAPACITY_FACTORED,
                scaling: FeatureScaling | None = None) -> ModelParams:
    """Fresh Glorot-initialized parameters."""
    if capacity_mode not in (CAPACITY_FACTORED, CAPACITY_RAW):
        raise ConfigError(f"unknown capacity mode '{capacity_mode}'")
    if iterations < 1 or chunk_len < 1:
        raise ConfigError("iterations and chunk_len must be >= 1")
    feat = max(link_feature_dim(capacity_mode), 1 + PRIORITY_LEVELS + 1,
               2 + N_TRAFFIC_MODELS)
    if hidden_dim < feat:
        raise ConfigError(f"hidden_dim {hidden_dim} smaller than the widest "
                          f"feature vector ({feat})")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0D5E]))
    return ModelParams(
        flow_cell=dm.init_gru(rng, 2 * hidden_dim, hidden_dim),
        queue_cell=dm.init_gru(rng, hidden_dim, hidden_dim),
        link_cell=dm.init_gru(rng, hidden_dim, hidden_dim),
        occupancy_head=dm.init_mlp(rng, hidden_dim, hidden_dim, 1, "sigmoid"),
        flow_head=dm.init_mlp(rng, hidden_dim, hidden_dim, 1, "identity"),
        hidden_dim=hidden_dim,
        iterations=iterations,
        chunk_len=chunk_len,
        capacity_mode=capacity_mode,
        scaling=scaling if scaling is not None else FeatureScaling(),
    )


def named_arrays(params: ModelParams):
    for sub in ("flow_cell", "queue_cell", "link_cell", "occupancy_head",
                "flow_head"):
        yield from dm.named_arrays(getattr(params, sub), prefix=sub + ".")


def bind_model(tape: Tape, params: ModelParams) -> ModelParams:
    return replace(
        params,
        flow_cell=dm.bind(tape, params.flow_cell),
        queue_cell=dm.bind(tape, params.queue_cell),
        link_cell=dm.bind(tape, params.link_cell),
        occupancy_head=dm.bind(tape, params.occupancy_head),
        flow_head=dm.bind(tape, params.flow_head),
    )


def gradients(bound: ModelParams) -> dict[str, np.ndarray]:
    """Collect leaf gradients after backward(); missing grads come back as zeros."""
    out = {}
    for name, tensor in named_arrays(bound):
        out[name] = (tensor.grad if tensor.grad is not None
                     else np.zeros_like(tensor.values))
    return out


def parameter_dict(params: ModelParams) -> dict[str, np.ndarray]:
    return dict(named_arrays(params))


# ---------------------------------------------------------------------------
# Features

def link_features(sample: NetworkSample, scaling: FeatureScaling,
                  capacity_mode: str) -> np.ndarray:
    n = len(sample.links)
    x = np.zeros((n, link_feature_dim(capacity_mode)))
    for i, link in enumerate(sample.links):
        if capacity_mode == CAPACITY_FACTORED:
            x[i, 0] = link.capacity.c_ref / scaling.capacity_unit
            x[i, 1] = link.capacity.s_f
            base = 2
        else:
            x[i, 0] = link.capacity.effective / scaling.capacity_unit
            base = 1
        x[i, base + _POLICY_INDEX[link.sched_policy]] = 1.0
    return x


def queue_features(sample: NetworkSample, scaling: FeatureScaling) -> np.ndarray:
    n = len(sample.queues)
    x = np.zeros((n, 1 + PRIORITY_LEVELS + 1))
    for i, q in enumerate(sample.queues):
        if q.priority >= PRIORITY_LEVELS:
            raise ConfigError(f"queue {q.id} priority {q.priority} exceeds the "
                              f"{PRIORITY_LEVELS} encodable levels")
        x[i, 0] = q.buffer_size / scaling.size_unit
        x[i, 1 + q.priority] = 1.0
        x[i, 1 + PRIORITY_LEVELS] = q.weight
    return x


def flow_features(sample: NetworkSample, scaling: FeatureScaling) -> np.ndarray:
    n = len(sample.flows)
    x = np.zeros((n, 2 + N_TRAFFIC_MODELS))
    for i, f in enumerate(sample.flows):
        x[i, 0] = f.traffic.avg_rate / scaling.rate_unit
        x[i, 1] = f.traffic.avg_pkt_size / scaling.size_unit
        x[i, 2 + _TRAFFIC_INDEX[f.traffic.model]] = 1.0
    return x


def _pad_states(features: np.ndarray, hidden_dim: int) -> np.ndarray:
    n, width = features.shape
    if width > hidden_dim:
        raise ConfigError(f"feature width {width} exceeds hidden width {hidden_dim}")
    out = np.zeros((n, hidden_dim))
    out[:, :width] = features
    return out


def init_states(sample: NetworkSample, params: ModelParams,
                tape: Tape | None = None) -> HiddenStates:
    """Hidden states = features followed by zeros up to the hidden width."""
    if tape is None:
        tape = Tape()
    h = params.hidden_dim
    return HiddenStates(
        flows=tape.tensor(_pad_states(flow_features(sample, params.scaling), h)),
        queues=tape.tensor(_pad_states(queue_features(sample, params.scaling), h)),
        links=tape.tensor(_pad_states(
            link_features(sample, params.scaling, params.capacity_mode), h)),
    )


# ---------------------------------------------------------------------------
# Per-sample index structure for batched stages

class SampleStructure:
    """Precomputed gather/scatter indices for one sample.

    Flow scan position j batches every flow whose path is longer than j;
    active sets only shrink with j, so each step's states come from the
    previous step's output rows.
    """

    def __init__(self, sample: NetworkSample):
        flows = sample.flows
        self.n_flows = len(flows)
        self.n_queues = len(sample.queues)
        self.n_links = len(sample.links)
        lengths = np.array([len(f.path) for f in flows], dtype=np.intp)
        self.max_len = int(lengths.max()) if len(flows) else 0
        offsets = np.zeros(len(flows) + 1, dtype=np.intp)
        np.cumsum(lengths, out=offsets[1:])
        self.total_hops = int(offsets[-1])

        # Per flow-scan position: active flow ids, their position in the
        # previous active set, hop queue/link ids, message slot ids, and the
        # flows whose path ends here (for final-state assembly).
        self.flow_steps = []
        prev_active = np.arange(len(flows), dtype=np.intp)
        for j in range(self.max_len):
            active = np.flatnonzero(lengths > j).astype(np.intp)
            prev_pos = np.searchsorted(prev_active, active)
            q_idx = np.array([flows[f].path[j][0] for f in active], dtype=np.intp)
            l_idx = np.array([flows[f].path[j][1] for f in active], dtype=np.intp)
            slots = offsets[active] + j
            ends = np.flatnonzero(lengths[active] == j + 1).astype(np.intp)
            self.flow_steps.append(
                (active, prev_pos, q_idx, l_idx, slots, ends, active[ends]))
            prev_active = active

        # Message slot -> (queue, flow) maps for aggregation and delay rebuild.
        self.slot_queue = np.zeros(self.total_hops, dtype=np.intp)
        self.slot_flow = np.zeros(self.total_hops, dtype=np.intp)
        for f in flows:
            for j, (qid, _lid) in enumerate(f.path):
                self.slot_queue[offsets[f.id] + j] = qid
                self.slot_flow[offsets[f.id] + j] = f.id

        # Link scan positions over each link's queues in (priority, id) order.
        link_queues = [queues_of_link(sample, l.id) for l in sample.links]
        qlens = np.array([len(qs) for qs in link_queues], dtype=np.intp)
        self.max_queues = int(qlens.max()) if len(sample.links) else 0
        self.link_steps = []
        prev_active = np.arange(self.n_links, dtype=np.intp)
        for p in range(self.max_queues):
            active = np.flatnonzero(qlens > p).astype(np.intp)
            prev_pos = np.searchsorted(prev_active, active)
            q_idx = np.array([link_queues[l][p] for l in active], dtype=np.intp)
            ends = np.flatnonzero(qlens[active] == p + 1).astype(np.intp)
            self.link_steps.append((active, prev_pos, q_idx, ends, active[ends]))
            prev_active = active

        # Delay reconstruction constants.
        caps = np.array([l.capacity.effective for l in sample.links])
        bufs = np.array([q.buffer_size for q in sample.queues])
        self.wait_coef = np.zeros(self.total_hops)
        self.transmission = np.zeros(self.n_flows)
        for f in flows:
            pkt = f.traffic.avg_pkt_size
            for j, (qid, lid) in enumerate(f.path):
                self.wait_coef[offsets[f.id] + j] = bufs[qid] / caps[lid]
                self.transmission[f.id] += pkt / caps[lid]


def _check_finite(t: Tensor, stage: str, iteration: int) -> None:
    if not np.all(np.isfinite(t.values)):
        raise NumericError(f"non-finite hidden state in {stage} stage at "
                           f"iteration {iteration}")


def flow_stage(st: SampleStructure, bound: ModelParams, states: HiddenStates,
               chunk_len: int) -> tuple[Tensor, Tensor]:
    """Scan each flow's hops with the flow GRU; return (new flow states,
    per-hop messages).

    Paths longer than chunk_len are split into consecutive sub-sequences, each
    initialized with the previous sub-sequence's final state -- an exact
    refactoring of the unchunked scan.
    """
    h_f, h_q, h_l = states.flows, states.queues, states.links
    if st.n_flows == 0 or st.max_len == 0:
        empty = h_f.tape.tensor(np.zeros((0, h_f.values.shape[1])))
        return h_f, empty
    pieces: list[Tensor] = []
    final_pieces: list[Tensor] = []
    final_src: list[np.ndarray] = []
    final_dst: list[np.ndarray] = []
    slot_dst: list[np.ndarray] = []
    carried: Tensor | None = None
    for chunk_start in range(0, st.max_len, chunk_len):
        for j in range(chunk_start, min(chunk_start + chunk_len, st.max_len)):
            active, prev_pos, q_idx, l_idx, slots, ends, end_flows = st.flow_steps[j]
            if carried is None:
                state = dm.gather_rows(h_f, active)
            else:
                state = dm.gather_rows(carried, prev_pos)
            x = dm.concat_cols(dm.gather_rows(h_q, q_idx),
                               dm.gather_rows(h_l, l_idx))
            carried = dm.gru_step(bound.flow_cell, state, x)
            pieces.append(carried)
            slot_dst.append(slots)
            if len(ends):
                final_pieces.append(carried)
                final_src.append(ends)
                final_dst.append(end_flows)
    messages = dm.assemble_rows(pieces, [None] * len(pieces), slot_dst,
                                st.total_hops)
    new_h_f = dm.assemble_rows(final_pieces, final_src, final_dst, st.n_flows)
    return new_h_f, messages


def queue_stage(st: SampleStructure, bound: ModelParams, states: HiddenStates,
                messages: Tensor) -> Tensor:
    """Sum each queue's incoming flow messages (zero vector when none) and
    apply one queue-GRU step."""
    aggregated = dm.segment_sum(messages, st.slot_queue, st.n_queues)
    return dm.gru_step(bound.queue_cell, states.queues, aggregated)


def link_stage(st: SampleStructure, bound: ModelParams, states: HiddenStates,
               new_h_q: Tensor) -> Tensor:
    """Scan each link's queues in (priority, id) order with the link GRU."""
    h_l = states.links
    if st.n_links == 0 or st.max_queues == 0:
        return h_l
    final_pieces: list[Tensor] = []
    final_src: list[np.ndarray] = []
    final_dst: list[np.ndarray] = []
    carried: Tensor | None = None
    for p in range(st.max_queues):
        active, prev_pos, q_idx, ends, end_links = st.link_steps[p]
        if carried is None:
            state = dm.gather_rows(h_l, active)
        else:
            state = dm.gather_rows(carried, prev_pos)
        carried = dm.gru_step(bound.link_cell, state, dm.gather_rows(new_h_q, q_idx))
        if len(ends):
            final_pieces.append(carried)
            final_src.append(ends)
            final_dst.append(end_links)
    return dm.assemble_rows(final_pieces, final_src, final_dst, st.n_links)


def forward(sample: NetworkSample, params: ModelParams,
            tape: Tape | None = None,
            structure: SampleStructure | None = None) -> ForwardResult:
    """Run the full message-passing loop and both readouts."""
    if tape is None:
        tape = Tape()
    bound = bind_model(tape, params)
    st = structure if structure is not None else SampleStructure(sample)
    states = init_states(sample, params, tape)
    for t in range(params.iterations):
        new_h_f, messages = flow_stage(st, bound, states, params.chunk_len)
        _check_finite(new_h_f, "flow", t)
        new_h_q = queue_stage(st, bound, states, messages)
        _check_finite(new_h_q, "queue", t)
        states = HiddenStates(flows=new_h_f, queues=new_h_q, links=states.links)
        new_h_l = link_stage(st, bound, states, new_h_q)
        _check_finite(new_h_l, "link", t)
        states = HiddenStates(flows=new_h_f, queues=new_h_q, links=new_h_l)
    occupancy = dm.reshape(dm.mlp_forward(bound.occupancy_head, states.queues),
                           (st.n_queues,))
    flow_out = dm.reshape(dm.mlp_forward(bound.flow_head, states.flows),
                          (st.n_flows,))
    return ForwardResult(occupancy=occupancy, flow_head_out=flow_out,
                         tape=tape, bound=bound)


def reconstruct_delay(sample: NetworkSample, occupancy,
                      structure: SampleStructure | None = None):
    """Per-flow delay: predicted backlog bits over drain rate plus average
    packet transmission time, summed over the path. Differentiable when the
    occupancy is a tape tensor; plain arrays work too."""
    st = structure if structure is not None else SampleStructure(sample)
    if isinstance(occupancy, Tensor):
        waits = dm.mul_array(dm.gather_rows(occupancy, st.slot_queue), st.wait_coef)
        per_flow = dm.segment_sum(waits, st.slot_flow, st.n_flows)
        return dm.add_array(per_flow, st.transmission)
    occ = np.asarray(occupancy, dtype=np.float64)
    waits = occ[st.slot_queue] * st.wait_coef
    per_flow = np.zeros(st.n_flows)
    np.add.at(per_flow, st.slot_flow, waits)
    return per_flow + st.transmission


def predict_delays(sample: NetworkSample,
                   params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Inference convenience: (per-flow delays, per-queue occupancy) arrays."""
    st = SampleStructure(sample)
    result = forward(sample, params, structure=st)
    delays = reconstruct_delay(sample, result.occupancy, structure=st)
    return delays.values.copy(), result.occupancy.values.copy()


# ---------------------------------------------------------------------------
# Checkpoint IO

def checkpoint_to_dict(params: ModelParams) -> dict:
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "hidden_dim": params.hidden_dim,
        "iterations": params.iterations,
        "chunk_len": params.chunk_len,
        "capacity_mode": params.capacity_mode,
        "delay_scale": params.delay_scale,
        "scaling": params.scaling.to_dict(),
        "arrays": {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in named_arrays(params)
        },
    }


def save_checkpoint(path: str, params: ModelParams) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_to_dict(params), fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str) -> ModelParams:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid checkpoint JSON: {exc}") from exc
    if d.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint format version "
                              f"{d.get('format_version')}")
    params = init_params(seed=0, hidden_dim=d["hidden_dim"],
                         iterations=d["iterations"], chunk_len=d["chunk_len"],
                         capacity_mode=d["capacity_mode"],
                         scaling=FeatureScaling.from_dict(d["scaling"]))
    params.delay_scale = d["delay_scale"]
    arrays = d["arrays"]
    for name, arr in named_arrays(params):
        if name not in arrays:
            raise ValidationError(f"{path}: checkpoint missing array '{name}'")
        spec = arrays[name]
        data = np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
        if data.shape != arr.shape:
            raise ValidationError(f"{path}: array '{name}' has shape "
                                  f"{data.shape}, expected {arr.shape}")
        arr[...] = data
    return params
