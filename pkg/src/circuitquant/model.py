"""Edge-level forward pass with per-node precision and per-edge substitution.

Each node's input is the sum, in topological order of source, of one
contribution per incoming edge:

* a present edge contributes the source's output from this run;
* a patched edge contributes the supplied replacement;
* a masked-out edge contributes the source's output from the corrupt cache,
  or nothing when no corrupt cache is given.

The residual sum runs at the policy's residual precision: FP8 sums go
through ``add_f8`` one addend at a time, BF16 sums re-round after each add.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .graph import ComputationalGraph, Edge, NodeId
from .numerics import Precision, add_f8, decode_f8, encode_f8, quantize_to
from .pahq import (
    PrecisionPolicy,
    embed_weights,
    head_weights,
    mlp_weights,
    unembed_weights,
)
from .weights import WeightSet

LN_EPS = 1e-5


class ForwardError(ValueError):
    pass


@dataclass(frozen=True)
class EdgePatch:
    edge: Edge
    replacement: np.ndarray  # B x S x d_model contribution of edge.src


@dataclass(frozen=True)
class ActivationCache:
    """Immutable per-node outputs of one forward pass."""

    outputs: Mapping[NodeId, np.ndarray]
    head_z: Mapping[NodeId, np.ndarray]  # per-head pre-output activations, B x S x d_k
    logits: np.ndarray
    tag: str = ""
    policy: PrecisionPolicy | None = None

    def __getitem__(self, node: NodeId) -> np.ndarray:
        return self.outputs[node]


def _ro(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float32)
    a.setflags(write=False)
    return a


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Layer norm over the last axis, always at FP32."""
    x = np.asarray(x, dtype=np.float32)
    mu = x.mean(axis=-1, keepdims=True, dtype=np.float32)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True, dtype=np.float32)
    return (xc / np.sqrt(var + np.float32(LN_EPS)) * g + b).astype(np.float32)


def gelu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    c = np.float32(np.sqrt(2.0 / np.pi))
    return (0.5 * x * (1.0 + np.tanh(c * (x + np.float32(0.044715) * x**3)))).astype(np.float32)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)


def _q(x, p: Precision) -> np.ndarray:
    return quantize_to(x, p)


def head_qkv(x_ln: np.ndarray, wq, wk, wv, p: Precision):
    """Q/K/V projections of one head: cast input, FP32 accumulate, cast output."""
    xq = _q(x_ln, p)
    return _q(xq @ wq, p), _q(xq @ wk, p), _q(xq @ wv, p)


def head_attend(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Causal softmax attention at FP32; returns B x S x d_k."""
    dk = q.shape[-1]
    scores = (q @ np.swapaxes(k, -1, -2)) / np.float32(np.sqrt(dk))
    s = scores.shape[-1]
    mask = np.triu(np.ones((s, s), dtype=bool), k=1)
    scores = np.where(mask, np.float32(-1e30), scores).astype(np.float32)
    return (softmax(scores) @ v).astype(np.float32)


def head_output(z: np.ndarray, wo: np.ndarray, p: Precision) -> np.ndarray:
    return _q(_q(z, p) @ wo, p)


def head_forward(x_ln: np.ndarray, weights: WeightSet, layer: int, head: int, p: Precision):
    wq, wk, wv, wo = head_weights(weights, layer, head, p)
    q, k, v = head_qkv(x_ln, wq, wk, wv, p)
    z = head_attend(q, k, v)
    return z, head_output(z, wo, p)


def mlp_forward(x: np.ndarray, weights: WeightSet, layer: int, p: Precision) -> np.ndarray:
    lw = weights.layers[layer]
    w_in, w_out = mlp_weights(weights, layer, p)
    h = _q(_q(layer_norm(x, lw.ln2_g, lw.ln2_b), p) @ w_in, p)
    h = _q(gelu(h), p)
    return _q(h @ w_out, p)


def residual_sum(parts: list[np.ndarray], p: Precision, shape) -> np.ndarray:
    if not parts:
        return np.zeros(shape, dtype=np.float32)
    if p is Precision.P8:
        acc = encode_f8(parts[0])
        for c in parts[1:]:
            acc = add_f8(acc, encode_f8(c))
        return decode_f8(acc).astype(np.float32)
    acc = np.array(parts[0], dtype=np.float32, copy=True)
    for c in parts[1:]:
        acc = acc + c
        if p is not Precision.P32:
            acc = _q(acc, p)
    return acc


def node_input(
    graph: ComputationalGraph,
    node: NodeId,
    outputs: Mapping[NodeId, np.ndarray],
    corrupt: ActivationCache | None,
    patch: EdgePatch | None,
    p: Precision,
    shape,
) -> np.ndarray:
    parts = []
    for e in graph.incoming(node):
        if patch is not None and e == patch.edge:
            parts.append(patch.replacement)
        elif e in graph.present:
            parts.append(outputs[e.src])
        elif corrupt is not None:
            parts.append(corrupt.outputs[e.src])
    return residual_sum(parts, p, shape)


def forward(
    graph: ComputationalGraph,
    weights: WeightSet,
    tokens,
    precision: PrecisionPolicy,
    patch: EdgePatch | None = None,
    corrupt: ActivationCache | None = None,
    reuse: ActivationCache | None = None,
    tag: str = "",
) -> tuple[np.ndarray, ActivationCache]:
    """Run the model over ``tokens`` (B x S ids) and return logits and the cache.

    ``reuse`` lets a patched pass copy the outputs of every node before the
    patched edge's destination from an unpatched run of the same inputs;
    those nodes cannot be affected by the patch, so the result is identical
    to a full re-run.
    """
    cfg = weights.config
    if graph.config != cfg:
        raise ForwardError("graph and weights disagree on the model config")
    tok = np.asarray(tokens)
    if tok.ndim == 1:
        tok = tok[None, :]
    if tok.ndim != 2 or tok.shape[1] > cfg.seq_len:
        raise ForwardError(f"tokens must be B x S with S <= {cfg.seq_len}, got {tok.shape}")
    if tok.dtype.kind not in "iu" or tok.size == 0 or tok.min() < 0 or tok.max() >= cfg.vocab:
        raise ForwardError("token ids must be integers in [0, vocab)")
    B, S = tok.shape
    shape = (B, S, cfg.d_model)
    if patch is not None:
        if patch.edge not in graph.present:
            raise ForwardError(f"patch references masked-out or unknown edge {patch.edge}")
        if np.shape(patch.replacement) != shape:
            raise ForwardError(f"patch replacement shape {np.shape(patch.replacement)} != {shape}")
    if corrupt is not None and corrupt.logits.shape[:2] != (B, S):
        raise ForwardError("corrupt cache batch does not match tokens")

    stop = graph.index(patch.edge.dst) if (patch is not None and reuse is not None) else 0
    outputs: dict[NodeId, np.ndarray] = {}
    head_z: dict[NodeId, np.ndarray] = {}
    logits = None
    res_p = precision.residual
    for i, node in enumerate(graph.nodes):
        if i < stop:
            outputs[node] = reuse.outputs[node]
            if node in reuse.head_z:
                head_z[node] = reuse.head_z[node]
            continue
        p = precision.precision_of(node)
        if node.kind == "embed":
            w_e, w_pos = embed_weights(weights, res_p)
            outputs[node] = _ro(_q(w_e[tok] + w_pos[:S], res_p))
            continue
        x = node_input(graph, node, outputs, corrupt, patch, res_p, shape)
        if node.kind == "head":
            lw = weights.layers[node.layer]
            z, out = head_forward(layer_norm(x, lw.ln1_g, lw.ln1_b), weights, node.layer, node.head, p)
            head_z[node] = _ro(z)
            outputs[node] = _ro(out)
        elif node.kind == "mlp":
            outputs[node] = _ro(mlp_forward(x, weights, node.layer, p))
        else:
            w_u = unembed_weights(weights, res_p)
            xf = _q(layer_norm(x, weights.ln_f_g, weights.ln_f_b), res_p)
            logits = _ro(_q(xf @ w_u, res_p))
            outputs[node] = logits
    cache = ActivationCache(MappingProxyType(outputs), MappingProxyType(head_z), logits, tag, precision)
    return logits, cache
