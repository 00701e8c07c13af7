from __future__ import annotations

import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from circuitquant.graph import UNEMBED, ComputationalGraph, Edge, Head, ModelConfig
from circuitquant.model import head_forward, layer_norm
from circuitquant.numerics import Precision
from circuitquant.pahq import build_store, policy_for_edge
from circuitquant.scheduler import (
    ALL_STREAM_CONFIGS,
    HIGH,
    LOAD,
    LOW,
    BundleLoadError,
    DeadlockError,
    SchedulerError,
    StepCosts,
    StreamConfig,
    ThreeStreamExecutor,
    TimingModel,
    build_ops,
    closed_form,
    simulate,
    simulate_ops,
    simulate_plan,
)
from circuitquant.weights import random_weights

NAMES = ("none", "load", "compute", "both")
C582 = StepCosts(5.0, 8.0, 2.0)


@pytest.fixture(scope="module")
def setup():
    cfg = ModelConfig.make(2, 4, 32, 16, 4)
    ws = random_weights(cfg, 0)
    x = np.random.default_rng(0).normal(size=(4, 4, 32)).astype(np.float32)
    return ws, x


# ---- simulator


def test_simulated_examples():
    sims = {sc.name: simulate([C582], sc)[1] for sc in ALL_STREAM_CONFIGS}
    assert sims == {"none": 15.0, "load": 10.0, "compute": 13.0, "both": 8.0}
    assert sims["load"] < sims["compute"]
    for comp in (1, 4):
        assert simulate([C582], StreamConfig.parse("both"), comp)[1] == 8.0


def test_stream_config_parse():
    assert [StreamConfig.parse(n).name for n in NAMES] == list(NAMES)
    with pytest.raises(ValueError):
        StreamConfig.parse("all")


costs_st = st.builds(StepCosts, st.floats(0.0, 50), st.floats(0.0, 50), st.floats(0.0, 50), st.floats(0.0, 2))


@settings(max_examples=200)
@given(st.lists(costs_st, min_size=1, max_size=5))
def test_des_matches_closed_form(steps):
    for sc in ALL_STREAM_CONFIGS:
        per, total = simulate(steps, sc, 1)
        expect = [closed_form(c, sc) for c in steps]
        assert np.allclose(per, expect, rtol=1e-9, atol=1e-9)
        assert total == pytest.approx(sum(expect), rel=1e-9, abs=1e-9)


@settings(max_examples=200)
@given(st.lists(costs_st, min_size=1, max_size=5))
def test_split_bundle_never_slower_than_closed_form(steps):
    # per-part loads let Q/K/V/O compute start early, so the bound is one-sided
    for sc in ALL_STREAM_CONFIGS:
        per, _ = simulate(steps, sc, 4)
        assert all(p <= closed_form(c, sc) * (1 + 1e-9) + 1e-9 for p, c in zip(per, steps))


def test_split_bundle_pipelines_example():
    per, _ = simulate([StepCosts(1.0, 0.0, 1.0)], StreamConfig.parse("both"), 4)
    assert per[0] == pytest.approx(1.25)


@settings(max_examples=200)
@given(st.floats(1e3, 1e12), st.floats(1e3, 1e12), st.floats(1e3, 1e12), st.floats(0, 1e-3))
def test_simulator_soundness(bw, lo, hi, ov):
    cfg = ModelConfig.make(2, 4, 32, 16, 8)
    tm = TimingModel(bw, lo, hi, ov)
    order = list(ComputationalGraph.full(cfg))
    both = simulate_plan(order, cfg, tm, StreamConfig.parse("both"))
    none = simulate_plan(order, cfg, tm, StreamConfig.parse("none"))
    assert both[1] <= none[1] * (1 + 1e-12)
    c = StepCosts(3.0, 1.0, 2.0)
    assert simulate([c], StreamConfig.parse("both"))[1] >= max(c.t_low, c.t_transfer, c.t_high)


def test_simulated_traces_are_legal():
    for sc in ALL_STREAM_CONFIGS:
        ops = build_ops([C582, StepCosts(1, 2, 3, 0.5)], sc, 4)
        assert simulate_ops(ops).validate(ops) == []


def test_timing_model_validation():
    with pytest.raises(ValueError):
        TimingModel(0, 1, 1)
    with pytest.raises(ValueError):
        TimingModel(1, 1, 1, -1)
    with pytest.raises(ValueError):
        build_ops([C582], StreamConfig.parse("both"), 3)


def test_resident_bundle_costs_no_transfer():
    cfg = ModelConfig.make(1, 2, 8, 5, 3)
    tm = TimingModel(1e3, 1e6, 1e6)
    order = [Edge(Head(0, 0), UNEMBED), Edge(Head(0, 0), UNEMBED)]
    per, _ = simulate_plan(order, cfg, tm, StreamConfig.parse("none"))
    assert per[1] < per[0]


# ---- executor


def _run_all(ws, x, pol, costs, **kw):
    store = build_store(ws)
    out = {}
    with ThreeStreamExecutor(store) as ex:
        for sc in ALL_STREAM_CONFIGS:
            store.evict_all()
            out[sc.name] = ex.execute_step(pol, x, sc, costs, **kw)
    return out


def test_outputs_identical_across_configs_and_target_exact(setup):
    ws, x = setup
    pol = policy_for_edge(Edge(Head(1, 2), UNEMBED))
    runs = _run_all(ws, x, pol, StepCosts(0.002, 0.003, 0.001))
    ref = runs["none"]
    for r in runs.values():
        assert np.array_equal(r.output, ref.output)
        assert np.array_equal(r.assembled, ref.assembled)
    lw = ws.layers[1]
    z, out = head_forward(layer_norm(x, lw.ln1_g, lw.ln1_b), ws, 1, 2, Precision.P32)
    assert np.array_equal(ref.assembled[:, :, 2], z)


def test_trace_shapes(setup):
    ws, x = setup
    pol = policy_for_edge(Edge(Head(0, 1), UNEMBED))
    costs = StepCosts(0.004, 0.006, 0.002)
    runs = _run_all(ws, x, pol, costs)
    for name, r in runs.items():
        ops = build_ops([costs], StreamConfig.parse(name), 4)
        assert r.trace.validate(ops) == [], name
    ev = runs["none"].trace.by_op()
    loads_end = max(e.end for e in ev.values() if e.stream == LOAD)
    assert ev["s0.low"].start >= loads_end
    highs = [e for e in ev.values() if ".high." in e.op]
    assert min(e.start for e in highs) >= ev["s0.low"].end
    ev = runs["both"].trace.by_op()
    assert ev["s0.high.Q"].start >= ev["s0.load.Q"].end
    assert ev["s0.low"].start < ev["s0.load.O"].end  # low overlaps the transfer
    assert {e.stream for e in ev.values()} >= {LOAD, LOW, HIGH}


def test_jittered_runs_are_bitwise_stable(setup):
    ws, x = setup
    pol = policy_for_edge(Edge(Head(1, 0), UNEMBED))
    store = build_store(ws)
    rng = np.random.default_rng(0)
    ref = None
    with ThreeStreamExecutor(store) as ex:
        for i in range(20):
            store.evict_all()
            sc = ALL_STREAM_CONFIGS[i % 4]
            r = ex.execute_step(pol, x, sc, pace=False, jitter=rng, max_jitter_s=0.001)
            assert r.trace.validate(build_ops([StepCosts(0, 0, 0)], sc, 4)) == []
            ref = ref if ref is not None else r.output
            assert np.array_equal(r.output, ref)


def test_trace_csv(tmp_path, setup):
    ws, x = setup
    r = _run_all(ws, x, policy_for_edge(Edge(Head(0, 0), UNEMBED)), None, pace=False)["both"]
    path = tmp_path / "trace.csv"
    r.trace.write_csv(path)
    rows = list(csv.DictReader(path.open()))
    assert list(rows[0]) == ["stream", "op", "start_ns", "end_ns"]
    assert all(int(row["end_ns"]) >= int(row["start_ns"]) >= 0 for row in rows)


def test_resident_bundle_skips_load(setup):
    ws, x = setup
    store = build_store(ws)
    pol = policy_for_edge(Edge(Head(0, 3), UNEMBED))
    with ThreeStreamExecutor(store) as ex:
        ex.execute_step(pol, x, StreamConfig.parse("both"), pace=False)
        ex.execute_step(pol, x, StreamConfig.parse("both"), pace=False)
    assert store.telemetry.loads == 1


def test_errors(setup, monkeypatch):
    ws, x = setup
    store = build_store(ws)
    with ThreeStreamExecutor(store, watchdog_s=0.2) as ex:
        with pytest.raises(SchedulerError):
            ex.execute_step(policy_for_edge(Edge(Head(0, 0), UNEMBED)).__class__(None), x, StreamConfig.parse("both"))

        def broken(slot, part):
            raise OSError("link down")

        monkeypatch.setattr(store, "load_part", broken)
        with pytest.raises(BundleLoadError):
            ex.execute_step(policy_for_edge(Edge(Head(0, 1), UNEMBED)), x, StreamConfig.parse("both"), pace=False)
        monkeypatch.setattr(store, "load_part", lambda slot, part: None)
        with pytest.raises(DeadlockError):
            ex.execute_step(policy_for_edge(Edge(Head(0, 2), UNEMBED)), x, StreamConfig.parse("both"), pace=False)
