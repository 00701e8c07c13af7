"""Edge-level circuit discovery on small transformers with per-head mixed precision."""

from __future__ import annotations

from .acdc import CircuitResult, PruneConfig, run_acdc, threshold_grid
from .graph import EMBED, UNEMBED, ComputationalGraph, Edge, Head, ModelConfig, Mlp, NodeId, enumerate_edges
from .model import ActivationCache, forward
from .numerics import Precision, add_f8, decode_f8, encode_f8, quantize_rtn, round_bf16, round_f8
from .pahq import FP32_POLICY, RTN8_POLICY, PrecisionPolicy, make_provider, policy_for_edge
from .patching import EdgeScorer, MetricKind, PromptPair, ScoreMode, delta_L, epsilon_precision
from .planted import PlantedTask, generate_planted
from .weights import WeightSet, load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "CircuitResult",
    "PruneConfig",
    "run_acdc",
    "threshold_grid",
    "EMBED",
    "UNEMBED",
    "ComputationalGraph",
    "Edge",
    "Head",
    "ModelConfig",
    "Mlp",
    "NodeId",
    "enumerate_edges",
    "ActivationCache",
    "forward",
    "Precision",
    "add_f8",
    "decode_f8",
    "encode_f8",
    "quantize_rtn",
    "round_bf16",
    "round_f8",
    "FP32_POLICY",
    "RTN8_POLICY",
    "PrecisionPolicy",
    "make_provider",
    "policy_for_edge",
    "EdgeScorer",
    "MetricKind",
    "PromptPair",
    "ScoreMode",
    "delta_L",
    "epsilon_precision",
    "PlantedTask",
    "generate_planted",
    "WeightSet",
    "load_weights",
    "save_weights",
]
