"""Clean/corrupt prompt pairs, task metrics and edge scoring by activation patching."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import ComputationalGraph, Edge
from .model import ActivationCache, EdgePatch, forward
from .pahq import FP32_POLICY, PrecisionPolicy
from .weights import WeightSet


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class PromptPair:
    clean: tuple[int, ...]
    corrupt: tuple[int, ...]
    answer: int
    distractor: int

    def __post_init__(self):
        if len(self.clean) != len(self.corrupt):
            raise DatasetError("clean and corrupt prompts must have equal length")
        if self.answer == self.distractor:
            raise DatasetError("answer and distractor must differ")

    def validate(self, vocab: int) -> None:
        ids = list(self.clean) + list(self.corrupt) + [self.answer, self.distractor]
        if min(ids) < 0 or max(ids) >= vocab:
            raise DatasetError(f"token id outside [0, {vocab})")

    def to_json(self) -> str:
        return json.dumps(
            {"clean": list(self.clean), "corrupt": list(self.corrupt), "answer": self.answer, "distractor": self.distractor}
        )


def save_dataset(pairs: Sequence[PromptPair], path) -> None:
    Path(path).write_text("".join(p.to_json() + "\n" for p in pairs), encoding="utf-8")


def load_dataset(path) -> list[PromptPair]:
    pairs = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            pairs.append(
                PromptPair(tuple(int(t) for t in rec["clean"]), tuple(int(t) for t in rec["corrupt"]), int(rec["answer"]), int(rec["distractor"]))
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{n}: {exc}") from exc
    return pairs


class MetricKind(str, Enum):
    KL = "kl"
    LOGIT_DIFF = "logitdiff"


class ScoreMode(str, Enum):
    LOSS = "loss"
    ACT = "act"


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=-1, keepdims=True)
    return x - m - np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True))


def metric_kl(ref_logits, test_logits, position: int = -1) -> np.ndarray:
    """KL(softmax(ref) || softmax(test)) at ``position`` (natural log), per batch item.

    Accepts vocab vectors, S x vocab, or B x S x vocab arrays.
    """
    ref = np.asarray(ref_logits, dtype=np.float64)
    test = np.asarray(test_logits, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {test.shape}")
    if np.isnan(ref).any() or np.isnan(test).any():
        raise ValueError("NaN logits")
    if ref.ndim >= 2:
        ref = ref[..., position, :]
        test = test[..., position, :]
    lp, lq = _log_softmax(ref), _log_softmax(test)
    kl = np.sum(np.exp(lp) * (lp - lq), axis=-1)
    return np.maximum(kl, 0.0)


def metric_logit_diff(logits, answer, distractor, position: int = -1) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim >= 2:
        x = x[..., position, :]
    answer = np.asarray(answer)
    distractor = np.asarray(distractor)
    if x.ndim == 1:
        return x[answer] - x[distractor]
    rows = np.arange(x.shape[0])
    return x[rows, answer] - x[rows, distractor]


@dataclass(frozen=True)
class Batch:
    clean: np.ndarray
    corrupt: np.ndarray
    answer: np.ndarray
    distractor: np.ndarray

    @classmethod
    def from_pairs(cls, pairs: Sequence[PromptPair]) -> "Batch":
        if not pairs:
            raise DatasetError("empty dataset")
        lens = {len(p.clean) for p in pairs}
        if len(lens) != 1:
            raise DatasetError("all prompts in a dataset must share one length")
        return cls(
            np.array([p.clean for p in pairs], dtype=np.int64),
            np.array([p.corrupt for p in pairs], dtype=np.int64),
            np.array([p.answer for p in pairs], dtype=np.int64),
            np.array([p.distractor for p in pairs], dtype=np.int64),
        )


class EdgeScorer:
    """Scores edges of one (weights, dataset, metric) triple under arbitrary policies.

    Per policy, the corrupt full-graph run and the clean full-graph reference
    are computed once; per (mask, policy) the clean masked run is computed
    once. Each edge then costs one patched pass. Caches are guarded so the
    scorer may be shared by worker threads.
    """

    def __init__(self, weights: WeightSet, pairs: Sequence[PromptPair], metric: MetricKind = MetricKind.LOGIT_DIFF,
                 mode: ScoreMode = ScoreMode.LOSS):
        self.weights = weights
        self.pairs = list(pairs)
        self.batch = Batch.from_pairs(self.pairs)
        for p in self.pairs:
            p.validate(weights.config.vocab)
        self.metric = MetricKind(metric)
        self.mode = ScoreMode(mode)
        self.full = ComputationalGraph.full(weights.config)
        self._lock = threading.Lock()
        self._corrupt: dict = {}
        self._ref: dict = {}
        self._base: dict = {}
        self.evaluations = 0

    def _memo(self, store: dict, key, build):
        with self._lock:
            if key in store:
                return store[key]
        val = build()
        with self._lock:
            return store.setdefault(key, val)

    def corrupt_cache(self, policy: PrecisionPolicy) -> ActivationCache:
        return self._memo(self._corrupt, policy, lambda: forward(self.full, self.weights, self.batch.corrupt, policy, tag="corrupt")[1])

    def reference(self, policy: PrecisionPolicy) -> ActivationCache:
        return self._memo(self._ref, policy, lambda: forward(self.full, self.weights, self.batch.clean, policy, tag="clean")[1])

    def base(self, graph: ComputationalGraph, policy: PrecisionPolicy) -> ActivationCache:
        key = (graph.present, policy)
        return self._memo(
            self._base,
            key,
            lambda: forward(graph, self.weights, self.batch.clean, policy, corrupt=self.corrupt_cache(policy), tag="masked")[1],
        )

    def metric_values(self, logits: np.ndarray, policy: PrecisionPolicy) -> np.ndarray:
        if self.metric is MetricKind.KL:
            return metric_kl(self.reference(policy).logits, logits)
        return metric_logit_diff(logits, self.batch.answer, self.batch.distractor)

    def score(self, edge: Edge, graph: ComputationalGraph, policy: PrecisionPolicy) -> float:
        if edge not in graph.present:
            raise ValueError(f"edge {edge} is not present in the mask")
        corrupt = self.corrupt_cache(policy)
        base = self.base(graph, policy)
        patch = EdgePatch(edge, corrupt.outputs[edge.src])
        _, patched = forward(graph, self.weights, self.batch.clean, policy, patch=patch, corrupt=corrupt, reuse=base, tag="patched")
        with self._lock:
            self.evaluations += 1
        if self.mode is ScoreMode.ACT:
            d = patched.outputs[edge.dst].astype(np.float64) - base.outputs[edge.dst].astype(np.float64)
            return float(np.mean(np.sqrt(np.sum(d.reshape(d.shape[0], -1) ** 2, axis=1))))
        diff = np.abs(self.metric_values(patched.logits, policy) - self.metric_values(base.logits, policy))
        return float(np.mean(diff))


def delta_L(edge: Edge, dataset: Sequence[PromptPair], graph: ComputationalGraph, weights: WeightSet,
            policy: PrecisionPolicy, metric: MetricKind = MetricKind.LOGIT_DIFF) -> float:
    """Mean |metric(edge patched) - metric(current masked run)| over the dataset."""
    return EdgeScorer(weights, dataset, metric).score(edge, graph, policy)


def epsilon_precision(edge: Edge, dataset: Sequence[PromptPair], graph: ComputationalGraph, weights: WeightSet,
                      low_policy: PrecisionPolicy, metric: MetricKind = MetricKind.LOGIT_DIFF) -> float:
    """Gap between the edge's score under all-FP32 evaluation and under ``low_policy``."""
    scorer = EdgeScorer(weights, dataset, metric)
    return abs(scorer.score(edge, graph, FP32_POLICY) - scorer.score(edge, graph, low_policy))
