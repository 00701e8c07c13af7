from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from circuitquant.graph import EMBED, UNEMBED, ComputationalGraph, Edge, Head, Mlp, ModelConfig
from circuitquant.model import forward
from circuitquant.numerics import Precision, encode_f8, round_f8
from circuitquant.pahq import (
    FP32_POLICY,
    PrecisionPolicy,
    build_store,
    bundle_bytes,
    cast_weight,
    concat_heads,
    footprint,
    make_prefetch_plan,
    make_provider,
    mixed_assembly,
    policy_for_edge,
    split_heads,
)
from circuitquant.weights import random_weights

P8, P16, P32 = Precision.P8, Precision.P16, Precision.P32


# ---- policies


def test_policy_for_head_edge():
    pol = policy_for_edge(Edge(Head(1, 3), UNEMBED))
    assert pol.target == Head(1, 3)
    assert pol.precision_of(Head(1, 3)) is P32
    assert all(pol.precision_of(Head(l, h)) is P8 for l in range(2) for h in range(4) if (l, h) != (1, 3))
    assert pol.precision_of(Mlp(0)) is P16
    assert pol.precision_of(EMBED) is P32 and pol.precision_of(UNEMBED) is P32


def test_policy_depends_on_source_only():
    a = policy_for_edge(Edge(Head(0, 1), UNEMBED))
    b = policy_for_edge(Edge(Head(0, 1), Head(1, 0)))
    assert a == b and hash(a) == hash(b)


def test_embed_source_has_no_target():
    pol = policy_for_edge(Edge(EMBED, Head(0, 0)))
    assert pol.target is None
    assert pol.precision_of(Head(0, 0)) is P8


def test_mlp_source_elevates_mlp():
    pol = policy_for_edge(Edge(Mlp(0), UNEMBED))
    assert pol.precision_of(Mlp(0)) is P32 and pol.precision_of(Mlp(1)) is P16


def test_policy_validation_and_providers():
    with pytest.raises(ValueError):
        PrecisionPolicy(EMBED)
    with pytest.raises(ValueError):
        PrecisionPolicy(None, residual=Precision.P4)
    with pytest.raises(ValueError):
        make_provider("fp4")
    e = Edge(Head(0, 0), UNEMBED)
    assert make_provider("acdc")(e) == FP32_POLICY
    assert make_provider("pahq", 4)(e).attention is Precision.P4


# ---- assembly


def test_mixed_assembly_single_head():
    rng = np.random.default_rng(0)
    low = rng.normal(size=(2, 3, 1, 4)).astype(np.float32)
    high = rng.normal(size=(2, 3, 4)).astype(np.float32)
    assert np.array_equal(mixed_assembly(low, high, 0)[:, :, 0], high)


def test_mixed_assembly_zero_low():
    high = np.random.default_rng(1).normal(size=(2, 3, 4)).astype(np.float32)
    out = mixed_assembly(np.zeros((2, 3, 4, 4), np.float32), high, 2)
    assert np.array_equal(out[:, :, 2], high)
    assert not out[:, :, [0, 1, 3]].any()
    assert out.dtype == np.float32


def test_mixed_assembly_errors():
    with pytest.raises(ValueError):
        mixed_assembly(np.zeros((2, 3, 4)), np.zeros((2, 3, 4)), 0)
    with pytest.raises(ValueError):
        mixed_assembly(np.zeros((2, 3, 4, 4)), np.zeros((2, 3, 5)), 0)
    with pytest.raises(ValueError):
        mixed_assembly(np.zeros((2, 3, 4, 4)), np.zeros((2, 3, 4)), 4)


def test_target_slice_matches_fp32_forward():
    cfg = ModelConfig.make(2, 4, 16, 9, 5)
    ws = random_weights(cfg, 3)
    tok = np.random.default_rng(3).integers(0, 9, size=(4, 5))
    g = ComputationalGraph.full(cfg)
    _, ref = forward(g, ws, tok, FP32_POLICY)
    for h in range(4):
        _, mixed = forward(g, ws, tok, policy_for_edge(Edge(Head(0, h), UNEMBED)))
        # layer-0 heads read only the embedding, so their inputs agree across policies
        assert np.array_equal(mixed.head_z[Head(0, h)], ref.head_z[Head(0, h)])
        assert np.array_equal(mixed.outputs[Head(0, h)], ref.outputs[Head(0, h)])
        other = Head(0, (h + 1) % 4)
        assert not np.array_equal(mixed.head_z[other], ref.head_z[other])


@settings(max_examples=30)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_concat_split_identity_and_permutation(H, dk, seed):
    x = np.random.default_rng(seed).normal(size=(2, 3, H * dk)).astype(np.float32)
    heads = split_heads(x, H)
    assert np.array_equal(concat_heads(heads), x)
    perm = np.random.default_rng(seed).permutation(H)
    out = concat_heads(heads[:, :, perm])
    for i, p in enumerate(perm):
        assert np.array_equal(out[..., i * dk : (i + 1) * dk], x[..., p * dk : (p + 1) * dk])


# ---- weight casts and store


def test_cast_weight_grids():
    w = np.random.default_rng(0).normal(size=(8, 8)).astype(np.float32)
    assert np.array_equal(cast_weight(w, P32), w)
    assert np.array_equal(cast_weight(w, P8), round_f8(w))
    q = cast_weight(w, Precision.P4)
    step = np.abs(w).max() / 8
    assert np.allclose(q / step, np.round(q / step))


def test_store_fp8_bank_quarter_size_and_rederivable(mlp_weights):
    store = build_store(mlp_weights)
    tel = store.telemetry
    assert tel.fp8_bytes * 4 == tel.fp32_bytes == mlp_weights.nbytes()
    again = build_store(mlp_weights)
    for i in store.device8:
        assert np.array_equal(store.device8[i], again.device8[i])
    for img, a in zip(store.fp8_image(), mlp_weights.arrays()):
        assert np.array_equal(img, round_f8(a))
        assert np.array_equal(encode_f8(img), encode_f8(a))


def test_bundle_bytes_gpt2_small_shape():
    cfg = ModelConfig.make(12, 12, 768, 50257, 1024, d_mlp=3072)
    # Q, K, V columns of one head plus that head's rows of W_O, at 4 bytes
    assert bundle_bytes(cfg) == (3 * 768 * 64 + 64 * 768) * 4


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1), st.booleans()), min_size=1, max_size=12))
def test_store_coherent_after_any_sequence(ops):
    ws = random_weights(ModelConfig.make(2, 2, 8, 5, 3), 0)
    store = build_store(ws)
    bound = store.telemetry.fp8_bytes + 2 * store.telemetry.bundle_bytes
    for l, h, evict in ops:
        if evict:
            store.evict_all()
        else:
            slot = store.load((l, h))
            assert slot.state == "ready"
        assert store.coherent()
        assert store.resident_bytes() <= bound
    assert store.telemetry.peak_device_bytes <= bound


def test_store_lru_and_reuse():
    ws = random_weights(ModelConfig.make(2, 2, 8, 5, 3), 0)
    store = build_store(ws, slots=2)
    store.load((0, 0))
    store.load((0, 1))
    _, needed = store.acquire((0, 0))
    assert not needed
    store.load((1, 0))  # evicts (0, 1), the least recently used
    assert store.find((0, 1)) is None and store.find((0, 0)) is not None
    assert store.telemetry.evictions == 1 and store.telemetry.loads == 3


def test_footprint_bound_formula():
    cfg = ModelConfig.make(2, 4, 32, 64, 8)
    fp = footprint(cfg)
    assert fp["device_bytes"] == fp["fp8_bytes"] + 2 * fp["bundle_bytes"]
    assert fp["fp8_bytes"] * 4 == fp["fp32_bytes"]


# ---- prefetch plans


def test_prefetch_examples():
    a, b = Head(0, 0), Head(0, 1)
    assert len(make_prefetch_plan([Edge(a, UNEMBED)])) == 0
    plan = make_prefetch_plan([Edge(a, UNEMBED), Edge(b, UNEMBED)])
    assert [(e.step, e.head, e.resident) for e in plan.entries] == [(1, (0, 1), False)]
    plan = make_prefetch_plan([Edge(a, UNEMBED), Edge(a, Head(1, 0)), Edge(EMBED, UNEMBED)])
    assert [(e.step, e.head, e.resident) for e in plan.entries] == [(1, (0, 0), True), (2, None, False)]
    assert plan.loads() == []


def test_prefetch_plan_follows_sweep_order():
    g = ComputationalGraph.full(ModelConfig.make(2, 2, 8, 5, 3))
    order = list(g)
    plan = make_prefetch_plan(order)
    assert len(plan) == len(order) - 1
    for entry, nxt in zip(plan.entries, order[1:]):
        assert entry.head == ((nxt.src.layer, nxt.src.head) if nxt.src.is_head else None)
