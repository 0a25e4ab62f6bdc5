"""Federated learning with learnable binarization of uplink model updates."""

from .binarizer import (
    StepSizeParam,
    UpdateDelta,
    binarize_backward,
    binarize_forward,
    binarize_theory_variant,
    effective_alpha,
    init_step_size,
    variance_ratio_q,
)
from .codecs import CodecKind, compress, decode_signs, encode_signs, uplink_bytes
from .config import ExperimentConfig, load_config, parse_config
from .datasets import LabeledDataset, PartitionSpec, load_idx, partition, partition_stats, synth_blobs
from .fed_engine import aggregate, run_experiment, sample_clients
from .nn import MLP, GlobalModel, evaluate
from .tensor import SeededRng

__version__ = "0.1.0"

__all__ = [
    "aggregate",
    "binarize_backward",
    "binarize_forward",
    "binarize_theory_variant",
    "CodecKind",
    "compress",
    "decode_signs",
    "effective_alpha",
    "encode_signs",
    "evaluate",
    "ExperimentConfig",
    "GlobalModel",
    "init_step_size",
    "LabeledDataset",
    "load_config",
    "load_idx",
    "MLP",
    "parse_config",
    "partition",
    "partition_stats",
    "PartitionSpec",
    "run_experiment",
    "sample_clients",
    "SeededRng",
    "StepSizeParam",
    "synth_blobs",
    "UpdateDelta",
    "uplink_bytes",
    "variance_ratio_q",
]
