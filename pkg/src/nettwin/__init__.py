"""nettwin: per-flow delay prediction for packet networks.

A flow/queue/link message-passing model with scale-independent capacity
encoding, a discrete-event queueing simulator for ground truth, a power-law
topology generator, a dataset builder with capacity-factorization
augmentation, and a training/evaluation/benchmark CLI.
"""

from .core import (
    CapacityFactor,
    Flow,
    Link,
    NetworkSample,
    NettwinError,
    PerformanceLabels,
    PktSizeDist,
    Queue,
    SchedPolicy,
    TrafficDescriptor,
    TrafficModel,
    ValidationReport,
    flows_through_queue,
    queues_of_link,
    read_samples_jsonl,
    validate_sample,
    write_samples_jsonl,
)
from .diffmath import AdamState, GruParams, MlpParams, Tape, Tensor
from .model import (
    FeatureScaling,
    ModelParams,
    forward,
    init_params,
    load_checkpoint,
    predict_delays,
    reconstruct_delay,
    save_checkpoint,
)
from .simnet import SimConfig, calibrate_intensity, simulate, simulate_detailed
from .topogen import TopoGenConfig, default_config, generate_topology, is_strongly_connected

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "CapacityFactor",
    "FeatureScaling",
    "Flow",
    "GruParams",
    "Link",
    "MlpParams",
    "ModelParams",
    "NettwinError",
    "NetworkSample",
    "PerformanceLabels",
    "PktSizeDist",
    "Queue",
    "SchedPolicy",
    "SimConfig",
    "Tape",
    "Tensor",
    "TopoGenConfig",
    "TrafficDescriptor",
    "TrafficModel",
    "ValidationReport",
    "calibrate_intensity",
    "default_config",
    "flows_through_queue",
    "forward",
    "generate_topology",
    "init_params",
    "is_strongly_connected",
    "load_checkpoint",
    "predict_delays",
    "queues_of_link",
    "read_samples_jsonl",
    "reconstruct_delay",
    "save_checkpoint",
    "simulate",
    "simulate_detailed",
    "validate_sample",
    "write_samples_jsonl",
]
