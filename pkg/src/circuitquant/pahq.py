"""Per-head precision allocation, the dual-precision weight store and prefetch plans."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .graph import EMBED, UNEMBED, Edge, ModelConfig, NodeId
from .numerics import Precision, bytes_per_element, decode_f8, encode_f8, quantize_rtn, quantize_to, round_f8
from .weights import WeightSet

P4, P8, P16, P32 = Precision.P4, Precision.P8, Precision.P16, Precision.P32


@dataclass(frozen=True)
class PrecisionPolicy:
    """Maps every graph node to a compute precision.

    ``residual`` covers the embedding, the unembedding and the residual-stream
    sums that form each node's input. Layer norm always runs at FP32.
    """

    target: NodeId | None = None
    attention: Precision = P8
    non_attention: Precision = P16
    target_precision: Precision = P32
    residual: Precision = P32

    def __post_init__(self):
        if self.target is not None and self.target.kind not in ("head", "mlp"):
            raise ValueError(f"only heads and MLPs can be elevated, got {self.target}")
        if self.residual is P4:
            raise ValueError("the residual stream cannot run on the 4-bit integer grid")

    def precision_of(self, node: NodeId) -> Precision:
        if self.target is not None and node == self.target:
            return self.target_precision
        if node.kind == "head":
            return self.attention
        if node.kind == "mlp":
            return self.non_attention
        return self.residual

    def describe(self) -> str:
        tgt = str(self.target) if self.target is not None else "-"
        return (
            f"target={tgt} attn={self.attention.label} mlp={self.non_attention.label} "
            f"resid={self.residual.label}"
        )


FP32_POLICY = PrecisionPolicy(None, P32, P32, P32, P32)
RTN8_POLICY = PrecisionPolicy(None, P8, P8, P8, P8)


def policy_for_edge(e: Edge, low: Precision = P8) -> PrecisionPolicy:
    """Elevate the edge's source to FP32; every other head runs at ``low``.

    MLP-sourced edges elevate the MLP; Embed-sourced edges elevate nothing.
    """
    low = Precision(low)
    non_attn = P16 if low >= P8 else low
    target = e.src if e.src.kind in ("head", "mlp") else None
    return PrecisionPolicy(target, low, non_attn, P32, P32)


PolicyProvider = Callable[[Edge], PrecisionPolicy]

METHODS = ("acdc", "rtn8", "pahq")


def make_provider(method: str, low: int = 8) -> PolicyProvider:
    if method == "acdc":
        return lambda e: FP32_POLICY
    if method == "rtn8":
        return lambda e: RTN8_POLICY
    if method == "pahq":
        p = Precision(low)
        return lambda e: policy_for_edge(e, p)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


# ---------------------------------------------------------------- weight casts


def cast_weight(w: np.ndarray, p: Precision) -> np.ndarray:
    """Weights onto the compute grid of ``p``.

    FP8 is a direct round-to-nearest-even cast onto E4M3 at unit scale so that
    the absolute 2^-6 floor applies; the 4-bit grid is per-tensor RTN.
    """
    p = Precision(p)
    if p is P32:
        return np.ascontiguousarray(w, dtype=np.float32)
    if p is P16:
        return quantize_to(w, P16)
    if p is P8:
        return round_f8(w)
    q, _ = quantize_rtn(np.asarray(w, dtype=np.float32), 4)
    return q.astype(np.float32)


def head_slices(ws: WeightSet, layer: int, head: int):
    """FP32 views (W_Q, W_K, W_V columns and W_O rows) owned by one head."""
    dk = ws.config.d_k
    s = slice(head * dk, (head + 1) * dk)
    lw = ws.layers[layer]
    return lw.W_Q[:, s], lw.W_K[:, s], lw.W_V[:, s], lw.W_O[s, :]


def head_weights(ws: WeightSet, layer: int, head: int, p: Precision):
    """Per-head weight bundle at precision ``p`` (memoised on the weight set)."""
    p = Precision(p)
    return ws.cached(
        ("head", layer, head, int(p)),
        lambda: tuple(cast_weight(w, p) for w in head_slices(ws, layer, head)),
    )


def mlp_weights(ws: WeightSet, layer: int, p: Precision):
    p = Precision(p)
    lw = ws.layers[layer]
    return ws.cached(("mlp", layer, int(p)), lambda: (cast_weight(lw.W_in, p), cast_weight(lw.W_out, p)))


def embed_weights(ws: WeightSet, p: Precision):
    p = Precision(p)
    return ws.cached(("embed", int(p)), lambda: (cast_weight(ws.W_E, p), cast_weight(ws.W_pos, p)))


def unembed_weights(ws: WeightSet, p: Precision):
    p = Precision(p)
    return ws.cached(("unembed", int(p)), lambda: cast_weight(ws.W_U, p))


# ----------------------------------------------------------- assembly helpers


def mixed_assembly(low: np.ndarray, high: np.ndarray, target: int) -> np.ndarray:
    """Per-head activations with slice ``target`` taken verbatim from ``high``.

    ``low`` is B x S x H x d_k (values on the low-precision grid), ``high`` is
    B x S x d_k. The result is float32 throughout.
    """
    low = np.asarray(low)
    high = np.asarray(high)
    if low.ndim != 4:
        raise ValueError(f"low must be B x S x H x d_k, got shape {low.shape}")
    if high.shape != low.shape[:2] + low.shape[3:]:
        raise ValueError(f"high shape {high.shape} does not match low {low.shape}")
    if not 0 <= target < low.shape[2]:
        raise ValueError(f"target head {target} out of range for H={low.shape[2]}")
    out = low.astype(np.float32, copy=True)
    out[:, :, target, :] = high.astype(np.float32)
    return out


def concat_heads(per_head: np.ndarray) -> np.ndarray:
    """B x S x H x d_k -> B x S x (H*d_k), head-major."""
    a = np.asarray(per_head, dtype=np.float32)
    if a.ndim != 4:
        raise ValueError(f"expected B x S x H x d_k, got shape {a.shape}")
    b, s, h, dk = a.shape
    return a.reshape(b, s, h * dk)


def split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, s, d = x.shape
    return np.asarray(x).reshape(b, s, n_heads, d // n_heads)


# -------------------------------------------------------------- weight store

BUNDLE_PARTS = ("Q", "K", "V", "O")


@dataclass
class BundleSlot:
    """Device slot holding the FP32 bundle of one head."""

    head: tuple[int, int] | None = None
    state: str = "empty"  # empty -> loading -> ready
    parts: dict = field(default_factory=dict)
    part_ready: dict = field(default_factory=lambda: {p: threading.Event() for p in BUNDLE_PARTS})

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.parts.values())


@dataclass
class StoreTelemetry:
    fp32_bytes: int
    fp8_bytes: int
    bundle_bytes: int
    slots: int
    loads: int = 0
    evictions: int = 0
    peak_device_bytes: int = 0

    def device_bound(self) -> int:
        return self.fp8_bytes + self.slots * self.bundle_bytes

    def as_dict(self) -> dict:
        return {
            "fp32_bytes": self.fp32_bytes,
            "fp8_bytes": self.fp8_bytes,
            "bundle_bytes": self.bundle_bytes,
            "slots": self.slots,
            "loads": self.loads,
            "evictions": self.evictions,
            "peak_device_bytes": self.peak_device_bytes,
        }


class WeightStore:
    """FP32 masters on the host plus an E4M3 image and FP32 bundle slots on the device.

    The device bank is stored as uint8 codes so its byte count is real, not
    notional. Bundle slots move ``empty -> loading -> ready`` and each bundle
    part has its own event so compute can wait on exactly the part it needs.
    """

    def __init__(self, weights: WeightSet, slots: int = 2):
        if slots < 1:
            raise ValueError("need at least one bundle slot")
        self.host = weights
        self.config = weights.config
        self.device8 = {}
        for i, a in enumerate(weights.arrays()):
            codes = encode_f8(a)
            codes.setflags(write=False)
            self.device8[i] = codes
        self._slots = [BundleSlot() for _ in range(slots)]
        self._lock = threading.Lock()
        self._lru: list[int] = []
        fp8 = sum(c.nbytes for c in self.device8.values())
        self.telemetry = StoreTelemetry(
            fp32_bytes=weights.nbytes(),
            fp8_bytes=fp8,
            bundle_bytes=bundle_bytes(self.config),
            slots=slots,
            peak_device_bytes=fp8,
        )

    def fp8_image(self) -> list[np.ndarray]:
        """Decoded values of the device bank, in WeightSet.arrays() order."""
        return [decode_f8(self.device8[i]).astype(np.float32) for i in range(len(self.device8))]

    def resident_bytes(self) -> int:
        with self._lock:
            return self.telemetry.fp8_bytes + sum(s.nbytes() for s in self._slots)

    def find(self, head: tuple[int, int]) -> BundleSlot | None:
        with self._lock:
            for s in self._slots:
                if s.head == head and s.state != "empty":
                    return s
        return None

    def acquire(self, head: tuple[int, int]) -> tuple[BundleSlot, bool]:
        """Slot for ``head``; the flag is True when a load is required."""
        with self._lock:
            for i, s in enumerate(self._slots):
                if s.head == head and s.state != "empty":
                    self._touch(i)
                    return s, False
            idx = next((i for i, s in enumerate(self._slots) if s.state == "empty"), None)
            if idx is None:
                idx = self._lru[0]
                self.telemetry.evictions += 1
            slot = BundleSlot(head=head, state="loading")
            self._slots[idx] = slot
            self._touch(idx)
            return slot, True

    def _touch(self, idx: int) -> None:
        if idx in self._lru:
            self._lru.remove(idx)
        self._lru.append(idx)

    def evict_all(self) -> None:
        with self._lock:
            for i, s in enumerate(self._slots):
                if s.state != "empty":
                    self.telemetry.evictions += 1
                self._slots[i] = BundleSlot()
            self._lru.clear()

    def load_part(self, slot: BundleSlot, part: str) -> None:
        layer, head = slot.head
        idx = BUNDLE_PARTS.index(part)
        slot.parts[part] = np.array(head_slices(self.host, layer, head)[idx], dtype=np.float32, copy=True)
        slot.part_ready[part].set()
        if all(slot.part_ready[p].is_set() for p in BUNDLE_PARTS):
            with self._lock:
                slot.state = "ready"
                self.telemetry.loads += 1
                dev = self.telemetry.fp8_bytes + sum(s.nbytes() for s in self._slots)
                self.telemetry.peak_device_bytes = max(self.telemetry.peak_device_bytes, dev)

    def load(self, head: tuple[int, int]) -> BundleSlot:
        slot, needed = self.acquire(head)
        if needed:
            for part in BUNDLE_PARTS:
                self.load_part(slot, part)
        return slot

    def coherent(self) -> bool:
        """Every ready bundle is bitwise equal to its host master."""
        with self._lock:
            slots = [s for s in self._slots if s.state == "ready"]
        for s in slots:
            masters = head_slices(self.host, *s.head)
            for part, m in zip(BUNDLE_PARTS, masters):
                if s.parts[part].tobytes() != np.ascontiguousarray(m).tobytes():
                    return False
        return True


def build_store(weights: WeightSet, slots: int = 2) -> WeightStore:
    return WeightStore(weights, slots)


def bundle_bytes(cfg: ModelConfig) -> int:
    """FP32 bytes of one head bundle: its Q/K/V columns plus its W_O rows."""
    return 4 * cfg.d_model * cfg.d_k * 4


def model_elements(cfg: ModelConfig) -> int:
    d = cfg.d_model
    n = cfg.vocab * d * 2 + cfg.seq_len * d + 2 * d
    per_layer = 2 * d + 4 * d * d
    if cfg.has_mlp:
        per_layer += 2 * d + 2 * d * cfg.d_mlp
    return n + cfg.n_layers * per_layer


def footprint(cfg: ModelConfig, slots: int = 2) -> dict:
    """Shape arithmetic for the device-resident bytes under the per-head policy."""
    n = model_elements(cfg)
    fp32 = int(n * bytes_per_element(P32))
    fp8 = int(n * bytes_per_element(P8))
    device = fp8 + slots * bundle_bytes(cfg)
    return {"fp32_bytes": fp32, "fp8_bytes": fp8, "bundle_bytes": bundle_bytes(cfg), "device_bytes": device, "ratio": device / fp32}


# ------------------------------------------------------------- prefetch plan


@dataclass(frozen=True)
class PrefetchEntry:
    step: int
    head: tuple[int, int] | None  # None when the next source is not a head
    resident: bool  # already loaded by an earlier entry; no transfer needed


@dataclass(frozen=True)
class PrefetchPlan:
    entries: tuple[PrefetchEntry, ...]

    def loads(self) -> list[PrefetchEntry]:
        return [e for e in self.entries if e.head is not None and not e.resident]

    def __len__(self) -> int:
        return len(self.entries)


def _head_of(node: NodeId) -> tuple[int, int] | None:
    return (node.layer, node.head) if node.kind == "head" else None


def make_prefetch_plan(order: Sequence[Edge]) -> PrefetchPlan:
    """Entry t schedules the bundle of edge t+1's source.

    A bundle equal to the one needed at step t is already resident and is
    marked so instead of being transferred again.
    """
    entries = []
    for t in range(len(order) - 1):
        nxt = _head_of(order[t + 1].src)
        cur = _head_of(order[t].src)
        entries.append(PrefetchEntry(t + 1, nxt, resident=nxt is not None and nxt == cur))
    return PrefetchPlan(tuple(entries))


__all__ = [
    "EMBED",
    "UNEMBED",
    "FP32_POLICY",
    "RTN8_POLICY",
    "PrecisionPolicy",
    "policy_for_edge",
    "make_provider",
    "mixed_assembly",
    "concat_heads",
    "WeightStore",
    "build_store",
    "PrefetchPlan",
    "make_prefetch_plan",
]
