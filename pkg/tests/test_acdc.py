from __future__ import annotations

import csv

import numpy as np
import pytest

from circuitquant.acdc import (
    THREADS_ENV,
    PruneConfig,
    ScoreTableCache,
    run_acdc,
    threshold_grid,
    worker_count,
    write_score_tables,
)
from circuitquant.graph import ComputationalGraph
from circuitquant.pahq import FP32_POLICY, make_provider
from circuitquant.patching import EdgeScorer, PromptPair, ScoreMode

from conftest import planted


def _run(task, tau, method="acdc", **kw):
    g = ComputationalGraph.full(task.weights.config)
    return run_acdc(g, task.weights, task.dataset, PruneConfig(tau, **kw), make_provider(method))


def test_tau_zero_prunes_nothing():
    task = planted(0)
    res = _run(task, 0.0)
    assert res.n_iterations == 1
    assert res.iterations[0].change_rate == 0.0
    assert res.mask == ComputationalGraph.full(task.weights.config).present


def test_huge_tau_prunes_everything_in_one_iteration():
    res = _run(planted(0), 1e6)
    assert res.mask == frozenset() and res.n_iterations == 1


def test_separating_tau_recovers_planted_circuit():
    task = planted(6, layers=1, heads=4)
    scores = _run(task, 0.0).iterations[0].scores
    lo = max(s for e, s in scores.items() if e not in task.ground_truth)
    hi = min(s for e, s in scores.items() if e in task.ground_truth)
    assert lo < hi
    res = _run(task, (lo + hi) / 2)
    assert res.mask == task.ground_truth


def test_tie_at_tau_is_kept():
    task = planted(0)
    scores = _run(task, 0.0).iterations[0].scores
    e, s = max(scores.items(), key=lambda kv: kv[1])
    res = _run(task, s, max_steps=1)
    assert e in res.mask


def test_mask_monotone_and_final_edges_pass_threshold():
    task = planted(2)
    res = _run(task, 0.05, method="pahq")
    prev = ComputationalGraph.full(task.weights.config).present
    for rec in res.iterations:
        assert rec.kept <= prev
        assert set(rec.scores) == set(prev)
        prev = rec.kept
    last = res.iterations[-1]
    assert all(last.scores[e] >= 0.05 for e in res.mask)


def test_identical_prompts_prune_everything_in_both_modes():
    task = planted(1)
    same = tuple(PromptPair(p.clean, p.clean, p.answer, p.distractor) for p in task.dataset)
    g = ComputationalGraph.full(task.weights.config)
    for mode, kw in ((ScoreMode.LOSS, {}), (ScoreMode.ACT, {"delta": 1e-9})):
        res = run_acdc(g, task.weights, same, PruneConfig(1e-9, score_mode=mode, **kw), make_provider("acdc"))
        assert res.mask == frozenset()


def test_policy_provider_neutral_at_fp32():
    task = planted(3)
    g = ComputationalGraph.full(task.weights.config)
    a = run_acdc(g, task.weights, task.dataset, PruneConfig(0.05), make_provider("acdc"))
    b = run_acdc(g, task.weights, task.dataset, PruneConfig(0.05), lambda e: FP32_POLICY)
    assert a.mask == b.mask
    assert [r.scores for r in a.iterations] == [r.scores for r in b.iterations]


def test_worker_count_does_not_change_results():
    task = planted(4)
    g = ComputationalGraph.full(task.weights.config)
    runs = [run_acdc(g, task.weights, task.dataset, PruneConfig(0.02), make_provider("pahq"), workers=w) for w in (1, 4)]
    assert runs[0].mask == runs[1].mask
    assert [r.scores for r in runs[0].iterations] == [r.scores for r in runs[1].iterations]


def test_cache_reuses_tables_across_thresholds():
    task = planted(5)
    g = ComputationalGraph.full(task.weights.config)
    cache = ScoreTableCache(EdgeScorer(task.weights, task.dataset), make_provider("acdc"), 1)
    run_acdc(g, task.weights, task.dataset, PruneConfig(0.001), None, cache=cache)
    n = cache.scorer.evaluations
    assert n >= len(g.edges)
    run_acdc(g, task.weights, task.dataset, PruneConfig(0.001), None, cache=cache)
    assert cache.scorer.evaluations == n


def test_change_rate_stop():
    res = _run(planted(0), 0.05, change_rate_eps=0.9)
    assert res.n_iterations == 1


def test_heads_only_keeps_embed_edges():
    task = planted(0)
    res = _run(task, 1e6, heads_only=True)
    assert res.mask and all(e.src.kind == "embed" for e in res.mask)


def test_prune_config_validation():
    with pytest.raises(ValueError):
        PruneConfig(-1.0)
    with pytest.raises(ValueError):
        PruneConfig(0.1, max_steps=0)
    with pytest.raises(ValueError):
        PruneConfig(0.1, change_rate_eps=1.0)
    with pytest.raises(ValueError):
        PruneConfig(0.1, delta=0.0)
    assert PruneConfig(0.1, delta=0.5, score_mode="act").threshold == 0.5
    assert PruneConfig(0.1, delta=0.5).threshold == 0.1


def test_empty_dataset_rejected():
    task = planted(0)
    with pytest.raises(ValueError):
        run_acdc(ComputationalGraph.full(task.weights.config), task.weights, [], PruneConfig(0.1), make_provider("acdc"))


# ---- threshold grid


def test_threshold_grid_values():
    g = threshold_grid(0.001, 3.16, 21)
    assert len(g) == 21 and g[0] == 0.001 and g[-1] == 3.16
    ratio = (3.16 / 0.001) ** (1 / 20)
    assert abs(ratio - 1.4962) < 1e-4
    assert abs(g[1] - 0.0014962) <= 1e-6
    assert np.allclose(np.diff(np.log(g)), np.log(ratio))
    assert threshold_grid(0.2, 0.7, 2) == [0.2, 0.7]


def test_threshold_grid_errors():
    for args in ((1.0, 1.0, 3), (2.0, 1.0, 3), (0.0, 1.0, 3), (0.1, 1.0, 1)):
        with pytest.raises(ValueError):
            threshold_grid(*args)


def test_worker_env_cap(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "2")
    assert worker_count(8) == 2
    monkeypatch.setenv(THREADS_ENV, "x")
    with pytest.raises(ValueError):
        worker_count()


def test_score_csv(tmp_path):
    res = _run(planted(0), 0.05)
    path = tmp_path / "s.csv"
    write_score_tables(res, path)
    rows = list(csv.DictReader(path.open()))
    assert set(rows[0]) == {"iteration", "edge", "src", "dst", "score", "kept"}
    assert len(rows) == sum(len(r.scores) for r in res.iterations)
