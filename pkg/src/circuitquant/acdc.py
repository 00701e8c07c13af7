"""Greedy edge pruning by activation patching."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import ComputationalGraph, Edge, enumerate_edges
from .pahq import PolicyProvider
from .patching import EdgeScorer, MetricKind, PromptPair, ScoreMode
from .weights import WeightSet

THREADS_ENV = "CIRCUITQUANT_THREADS"


def worker_count(requested: int | None = None) -> int:
    cap = os.environ.get(THREADS_ENV)
    n = requested if requested is not None else (os.cpu_count() or 1)
    if cap:
        try:
            n = min(n, int(cap))
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    return max(1, n)


@dataclass(frozen=True)
class PruneConfig:
    tau: float
    delta: float | None = None
    max_steps: int = 10
    change_rate_eps: float = 0.0
    metric: MetricKind = MetricKind.LOGIT_DIFF
    score_mode: ScoreMode = ScoreMode.LOSS
    heads_only: bool = False  # sweep only head-sourced edges; the rest are always kept

    def __post_init__(self):
        if not self.tau >= 0:
            raise ValueError(f"tau must be non-negative, got {self.tau}")
        if self.delta is not None and not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if not 0 <= self.change_rate_eps < 1:
            raise ValueError("change_rate_eps must lie in [0, 1)")
        object.__setattr__(self, "metric", MetricKind(self.metric))
        object.__setattr__(self, "score_mode", ScoreMode(self.score_mode))

    @property
    def threshold(self) -> float:
        if self.score_mode is ScoreMode.ACT and self.delta is not None:
            return self.delta
        return self.tau


@dataclass(frozen=True)
class IterationRecord:
    scores: dict  # Edge -> float, for every swept edge present at iteration start
    kept: frozenset
    change_rate: float


@dataclass(frozen=True)
class CircuitResult:
    mask: frozenset
    iterations: tuple[IterationRecord, ...]
    evaluations: int
    swept: tuple[Edge, ...]

    @property
    def n_iterations(self) -> int:
        return len(self.iterations)


class ScoreTableCache:
    """Score tables keyed by mask, so threshold sweeps reuse earlier work."""

    def __init__(self, scorer: EdgeScorer, provider: PolicyProvider, workers: int | None = None):
        self.scorer = scorer
        self.provider = provider
        self.workers = worker_count(workers)
        self._tables: dict[frozenset, dict] = {}

    def table(self, graph: ComputationalGraph, edges: Sequence[Edge]) -> dict:
        key = graph.present
        if key not in self._tables:
            def one(e):
                return self.scorer.score(e, graph, self.provider(e))

            if self.workers > 1 and len(edges) > 1:
                with ThreadPoolExecutor(self.workers) as pool:
                    vals = list(pool.map(one, edges))
            else:
                vals = [one(e) for e in edges]
            self._tables[key] = dict(zip(edges, vals))
        return self._tables[key]


def run_acdc(graph: ComputationalGraph, weights: WeightSet, dataset: Sequence[PromptPair], cfg: PruneConfig,
             policy_provider: PolicyProvider, cache: ScoreTableCache | None = None,
             workers: int | None = None) -> CircuitResult:
    """Score every present edge, drop those scoring below the threshold, repeat.

    Scores within an iteration are all taken against the mask at the start of
    that iteration. The loop stops after ``max_steps`` iterations, when no
    edges remain, or when the fraction of edges removed is at most
    ``change_rate_eps``.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if cache is None:
        cache = ScoreTableCache(EdgeScorer(weights, dataset, cfg.metric, cfg.score_mode), policy_provider, workers)
    start_evals = cache.scorer.evaluations
    thr = cfg.threshold

    current = graph
    records = []
    for _ in range(cfg.max_steps):
        swept = [e for e in enumerate_edges(current) if not cfg.heads_only or e.src.is_head]
        if not swept:
            break
        table = cache.table(current, swept)
        pruned = {e for e in swept if table[e] < thr}
        kept = current.present - pruned
        rate = len(pruned) / len(current.present)
        records.append(IterationRecord(dict(table), frozenset(kept), rate))
        current = current.with_present(kept)
        if not current.present or rate <= cfg.change_rate_eps:
            break
    swept_all = tuple(e for e in enumerate_edges(graph) if not cfg.heads_only or e.src.is_head)
    return CircuitResult(current.present, tuple(records), cache.scorer.evaluations - start_evals, swept_all)


def threshold_grid(lo: float, hi: float, n: int) -> list[float]:
    """``n`` log-uniform values from ``lo`` to ``hi``; both endpoints exact."""
    if not (0 < lo < hi):
        raise ValueError(f"need 0 < lo < hi, got lo={lo}, hi={hi}")
    if n < 2:
        raise ValueError("need at least two grid points")
    vals = [float(v) for v in np.geomspace(lo, hi, n)]
    vals[0], vals[-1] = float(lo), float(hi)
    return vals


def write_score_tables(result: CircuitResult, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "edge", "src", "dst", "score", "kept"])
        for i, rec in enumerate(result.iterations):
            for e, s in rec.scores.items():
                w.writerow([i, str(e), str(e.src), str(e.dst), repr(s), int(e in rec.kept)])
