"""Synthetic tasks with a known circuit.

The residual stream is split into role blocks. Every role value is written
as a signed pair ``+a`` on dimension ``2j`` and ``-a`` on ``2j+1`` so token
and position vectors stay mean-zero, which keeps layer norm from mixing
roles.

Prompts are ``[key, filler..., query]``. With two or more layers a
copy head in layer 0 attends to position 0 and writes the key into the
intermediate block at every position; a readout head in the last layer
attends to position 1 and maps the intermediate block onto the readout
block, which the unembedding turns into the key's logit. With one layer a
single head does both jobs. The ground-truth circuit is the chain of edges
along that path.

An optional interference head writes a large constant into every readout
dimension. In FP32 it cancels in the unembedding (which reads pair
differences), but in an FP8 residual sum it absorbs the planted signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import EMBED, UNEMBED, ComputationalGraph, Edge, Head, ModelConfig
from .model import forward
from .pahq import FP32_POLICY
from .patching import Batch, PromptPair, metric_logit_diff
from .weights import WeightSet


class ConstructionError(ValueError):
    pass


@dataclass(frozen=True)
class Layout:
    n_keys: int
    key: int  # first dimension of each block
    inter: int
    readout: int
    pos0: int
    pos1: int
    const: int
    noise: int  # first noise dimension; noise runs to d_model

    @classmethod
    def for_config(cls, cfg: ModelConfig, n_keys: int) -> "Layout":
        k2 = 2 * n_keys
        start = 0
        key, inter, readout = start, start + k2, start + 2 * k2
        pos0 = start + 3 * k2
        lay = cls(n_keys, key, inter, readout, pos0, pos0 + 2, pos0 + 4, pos0 + 6)
        if lay.noise > cfg.d_model:
            raise ConstructionError(f"d_model={cfg.d_model} too small for {n_keys} keys (need {lay.noise})")
        if n_keys > cfg.d_k:
            raise ConstructionError(f"d_k={cfg.d_k} must be at least n_keys={n_keys}")
        return lay


def _pair(vec: np.ndarray, start: int, j: int, val: float) -> None:
    vec[..., start + 2 * j] += val
    vec[..., start + 2 * j + 1] -= val


@dataclass(frozen=True)
class PlantedTask:
    weights: WeightSet
    dataset: tuple[PromptPair, ...]
    ground_truth: frozenset
    signal_scale: float
    readout_head: tuple[int, int]
    copy_head: tuple[int, int] | None
    interference_head: tuple[int, int] | None
    seed: int

    @property
    def critical_heads(self) -> list[tuple[int, int]]:
        return [h for h in (self.copy_head, self.readout_head) if h is not None]


def default_config(n_layers: int = 2, n_heads: int = 4, d_model: int = 32, seq_len: int = 4, n_keys: int = 3) -> ModelConfig:
    vocab = n_keys + 4 + 1
    return ModelConfig.make(n_layers, n_heads, d_model, vocab, seq_len)


def generate_planted(config: ModelConfig, seed: int = 0, signal_scale: float = 0.25, *, n_keys: int = 3,
                     n_items: int = 8, interference: float = 0.0, noise_scale: float = 0.1,
                     readout_gain: float = 8.0, relay_scale: float = 0.05, value_gain: float = 16.0,
                     check: bool = True) -> PlantedTask:
    """Build weights and prompts with a planted key-copying circuit.

    ``signal_scale`` is the magnitude the readout head writes into the
    readout block on clean prompts. ``relay_scale`` is the magnitude the
    copy head writes into the intermediate block; it sits well below the
    embedding scale, so coarse integer grids round it away while FP8 keeps
    it. ``interference`` > 0 adds a head that writes
    ``interference * signal_scale`` into every readout dimension.
    ``value_gain`` amplifies the readout head's value projection, which
    shrinks its output weights by the same factor for a given signal.
    """
    cfg = config
    if cfg.has_mlp:
        raise ConstructionError("planted tasks use attention-only models")
    if cfg.seq_len < 3:
        raise ConstructionError("seq_len must be at least 3 (key, filler, query)")
    n_fill = cfg.vocab - n_keys - 1
    if n_fill < 1:
        raise ConstructionError(f"vocab={cfg.vocab} leaves no filler tokens for {n_keys} keys")
    lay = Layout.for_config(cfg, n_keys)
    rng = np.random.default_rng(seed)
    d, dk, L, H = cfg.d_model, cfg.d_k, cfg.n_layers, cfg.n_heads
    two_hop = L >= 2
    readout_head = (L - 1, int(rng.integers(H)))
    copy_head = (0, int(rng.integers(H))) if two_hop else None
    spare = [(l, h) for l in range(L) for h in range(H) if (l, h) not in (readout_head, copy_head)]
    interference_head = None
    if interference > 0:
        last = [s for s in spare if s[0] == L - 1]
        if not last:
            raise ConstructionError("interference needs a spare head in the last layer")
        interference_head = last[int(rng.integers(len(last)))]

    # token and position embeddings
    query_tok = cfg.vocab - 1
    W_E = np.zeros((cfg.vocab, d))
    _pair(W_E, lay.const, 0, 1.0)
    for k in range(n_keys):
        _pair(W_E[k], lay.key, k, 1.0)
    n_noise_pairs = (d - lay.noise) // 2
    for t in range(n_keys, cfg.vocab):
        for j in range(n_noise_pairs):
            _pair(W_E[t], lay.noise, j, rng.normal(0, 0.5))
    W_pos = np.zeros((cfg.seq_len, d))
    _pair(W_pos[0], lay.pos0, 0, 1.0)
    _pair(W_pos[1], lay.pos1, 0, 1.0)

    attn_gain = 4.0
    layers = []
    for l in range(L):
        Wq, Wk, Wv, Wo = (np.zeros((d, d)) for _ in range(4))
        for h in range(H):
            cols = slice(h * dk, (h + 1) * dk)
            c0 = h * dk
            if (l, h) in (copy_head, readout_head) or (not two_hop and (l, h) == readout_head):
                attend = lay.pos0 if (l, h) == copy_head or not two_hop else lay.pos1
                Wq[lay.const, c0] = attn_gain
                Wq[lay.const + 1, c0] = -attn_gain
                Wk[attend, c0] = attn_gain
                Wk[attend + 1, c0] = -attn_gain
                src = lay.key if (l, h) == copy_head or not two_hop else lay.inter
                dst = lay.inter if (l, h) == copy_head else lay.readout
                vg = 0.5 if (l, h) == copy_head or not two_hop else 0.5 * value_gain
                for j in range(n_keys):
                    Wv[src + 2 * j, c0 + j] = vg
                    Wv[src + 2 * j + 1, c0 + j] = -vg
                    Wo[c0 + j, dst + 2 * j] = 1.0
                    Wo[c0 + j, dst + 2 * j + 1] = -1.0
            elif (l, h) == interference_head:
                Wv[lay.const, c0] = 0.5
                Wv[lay.const + 1, c0] = -0.5
                Wo[c0, lay.readout : lay.readout + 2 * n_keys] = 1.0
            else:
                Wq[:, cols] = rng.normal(0, noise_scale, (d, dk))
                Wk[:, cols] = rng.normal(0, noise_scale, (d, dk))
                Wv[:, cols] = rng.normal(0, noise_scale, (d, dk))
                if n_noise_pairs:
                    Wo[c0 : c0 + dk, lay.noise :] = rng.normal(0, noise_scale, (dk, d - lay.noise))
        layers.append(dict(ln1_g=np.ones(d), ln1_b=np.zeros(d), W_Q=Wq, W_K=Wk, W_V=Wv, W_O=Wo))
    W_U = np.zeros((d, cfg.vocab))
    for k in range(n_keys):
        W_U[lay.readout + 2 * k, k] = readout_gain
        W_U[lay.readout + 2 * k + 1, k] = -readout_gain
    ws = WeightSet.from_arrays(cfg, W_E, W_pos, layers, np.ones(d), np.zeros(d), W_U)

    # dataset
    pairs = []
    for _ in range(n_items):
        k = int(rng.integers(n_keys))
        k2 = int((k + 1 + rng.integers(n_keys - 1)) % n_keys)
        fill = [int(t) for t in rng.integers(n_keys, n_keys + n_fill, size=cfg.seq_len - 2)]
        pairs.append(PromptPair((k, *fill, query_tok), (k2, *fill, query_tok), k, k2))

    # calibrate the copy head first: the readout head reads what it writes
    if copy_head is not None:
        ws = _rescale_block(ws, pairs, lay.inter, copy_head, relay_scale)
    ws = _rescale_block(ws, pairs, lay.readout, readout_head, signal_scale)
    if interference_head is not None:
        ws = _rescale_interference(ws, pairs, lay, interference_head, interference * signal_scale)

    if two_hop:
        gt = {Edge(EMBED, Head(*copy_head)), Edge(Head(*copy_head), Head(*readout_head)), Edge(Head(*readout_head), UNEMBED)}
    else:
        gt = {Edge(EMBED, Head(*readout_head)), Edge(Head(*readout_head), UNEMBED)}
    task = PlantedTask(ws, tuple(pairs), frozenset(gt), float(signal_scale), readout_head, copy_head, interference_head, seed)
    if check:
        check_construction(task)
    return task


def _head_contribution(ws: WeightSet, pairs, head: tuple[int, int]) -> np.ndarray:
    graph = ComputationalGraph.full(ws.config)
    _, cache = forward(graph, ws, Batch.from_pairs(pairs).clean, FP32_POLICY)
    return cache.outputs[Head(*head)][:, -1, :]


def _scale_wo(ws: WeightSet, head: tuple[int, int], factor: float) -> WeightSet:
    l, h = head
    dk = ws.config.d_k
    Wo = np.array(ws.layers[l].W_O, dtype=np.float64)
    Wo[h * dk : (h + 1) * dk] *= factor
    return ws.replace_layer(l, W_O=Wo)


def _rescale_block(ws, pairs, block: int, head, target: float) -> WeightSet:
    """Scale a planted head's W_O so it writes ``target`` into the answer's pair of ``block``."""
    out = _head_contribution(ws, pairs, head)
    ans = np.array([p.answer for p in pairs])
    mag = np.abs(out[np.arange(len(pairs)), block + 2 * ans]).mean()
    if mag == 0:
        raise ConstructionError(f"head {head} writes nothing before scaling")
    return _scale_wo(ws, head, target / mag)


def _rescale_interference(ws, pairs, lay: Layout, head, target: float) -> WeightSet:
    out = _head_contribution(ws, pairs, head)
    mag = np.abs(out[:, lay.readout]).mean()
    return _scale_wo(ws, head, target / mag)


def task_metric(task: PlantedTask, mask: frozenset | None = None, policy=FP32_POLICY, weights: WeightSet | None = None) -> np.ndarray:
    """Per-item logit difference with edges outside ``mask`` fed corrupt activations.

    ``mask=None`` runs the full model; an empty mask feeds every edge corrupt values.
    """
    ws = weights or task.weights
    full = ComputationalGraph.full(ws.config)
    batch = Batch.from_pairs(task.dataset)
    if mask is None:
        logits, _ = forward(full, ws, batch.clean, policy)
    else:
        _, corrupt = forward(full, ws, batch.corrupt, policy)
        logits, _ = forward(full.with_present(mask), ws, batch.clean, policy, corrupt=corrupt)
    return metric_logit_diff(logits, batch.answer, batch.distractor)


def check_construction(task: PlantedTask, retain: float = 0.9) -> None:
    full = float(np.mean(task_metric(task)))
    circ = float(np.mean(task_metric(task, task.ground_truth)))
    if not full > 0:
        raise ConstructionError(f"planted path carries no signal (full-model logit diff {full:.3g})")
    if circ < retain * full:
        raise ConstructionError(f"circuit keeps {circ:.4g} of {full:.4g} logit diff, below {retain:.0%}")


def planted_suite(n_tasks: int = 10, seed: int = 0, config: ModelConfig | None = None, **kw) -> list[PlantedTask]:
    cfg = config or default_config()
    return [generate_planted(cfg, seed + i, **kw) for i in range(n_tasks)]
