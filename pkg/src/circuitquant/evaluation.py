"""ROC sweeps, faithfulness, quantization sweeps and the low-precision failure diagnostics."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .acdc import PruneConfig, ScoreTableCache, run_acdc, threshold_grid
from .graph import UNEMBED, ComputationalGraph, Edge, Head
from .model import forward, head_forward, layer_norm, node_input
from .numerics import F8_MIN_NORMAL, Precision, add_f8, encode_f8, f8_exponent, round_f8
from .pahq import FP32_POLICY, RTN8_POLICY, PrecisionPolicy, footprint, make_provider, policy_for_edge
from .patching import Batch, EdgeScorer
from .planted import Layout, PlantedTask, task_metric
from .weights import WeightSet

SCHEMA_VERSION = 1
DEFAULT_GRID = (0.001, 3.16, 21)


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    tpr: float
    fpr: float
    edge_count: int


def roc_auc(points: Iterable[tuple[float, float]]) -> float:
    """Area under the pessimistic step curve through the Pareto points.

    ``points`` are (FPR, TPR) pairs; (0, 0) and (1, 1) are added. Between
    consecutive frontier points the curve holds the lower TPR, so tied
    scores count against the classifier.
    """
    pts = set((float(f), float(t)) for f, t in points)
    pts |= {(0.0, 0.0), (1.0, 1.0)}
    frontier = []
    best = -1.0
    # sort by FPR ascending, TPR descending: keep points that raise the best TPR so far
    for f, t in sorted(pts, key=lambda p: (p[0], -p[1])):
        if t > best:
            frontier.append((f, t))
            best = t
    area = 0.0
    for (f0, t0), (f1, _) in zip(frontier, frontier[1:] + [(1.0, 1.0)]):
        area += (f1 - f0) * t0
    return area


def classify(mask: Iterable[Edge], universe: Sequence[Edge], truth: frozenset, threshold: float) -> RocPoint:
    mask = set(mask) & set(universe)
    pos = [e for e in universe if e in truth]
    neg = [e for e in universe if e not in truth]
    tp = sum(1 for e in pos if e in mask)
    fp = sum(1 for e in neg if e in mask)
    return RocPoint(threshold, tp / len(pos) if pos else 0.0, fp / len(neg) if neg else 0.0, len(mask))


def static_roc(scores: dict, truth: Iterable, thresholds: Sequence[float]) -> tuple[list[RocPoint], float]:
    """ROC of a fixed score table: an edge survives a threshold when its score is not below it."""
    truth = frozenset(truth)
    universe = list(scores)
    pts = [classify([e for e, s in scores.items() if s >= t], universe, truth, t) for t in thresholds]
    return pts, roc_auc((p.fpr, p.tpr) for p in pts)


def pairwise_auc(scores: dict, truth: Iterable) -> float:
    """Fraction of (in, out) pairs where the in-circuit edge scores strictly higher."""
    truth = frozenset(truth)
    pos = [s for e, s in scores.items() if e in truth]
    neg = [s for e, s in scores.items() if e not in truth]
    if not pos or not neg:
        raise ValueError("need at least one edge on each side")
    return sum(1 for p in pos for n in neg if p > n) / (len(pos) * len(neg))


@dataclass
class RocResult:
    method: str
    points: list[RocPoint]
    auc: float
    runtime_s: float
    evaluations: int
    first_table: dict

    def write_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "tpr", "fpr", "edge_count"])
            for p in self.points:
                w.writerow([repr(p.threshold), repr(p.tpr), repr(p.fpr), p.edge_count])


def roc_sweep(task: PlantedTask, method: str, thresholds: Sequence[float], base: PruneConfig | None = None,
              low: int = 8, workers: int | None = None) -> RocResult:
    """Run ACDC at every threshold and score the surviving edges against the planted circuit."""
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be ascending")
    base = base or PruneConfig(tau=float(thresholds[0]))
    graph = ComputationalGraph.full(task.weights.config)
    cache = ScoreTableCache(EdgeScorer(task.weights, task.dataset, base.metric, base.score_mode), make_provider(method, low), workers)
    t0 = time.perf_counter()
    points = []
    first = None
    for tau in thresholds:
        cfg = PruneConfig(float(tau), None, base.max_steps, base.change_rate_eps, base.metric, base.score_mode, base.heads_only)
        res = run_acdc(graph, task.weights, task.dataset, cfg, None, cache=cache)
        if first is None and res.iterations:
            first = dict(res.iterations[0].scores)
        points.append(classify(res.mask, res.swept, task.ground_truth, float(tau)))
    auc = roc_auc((p.fpr, p.tpr) for p in points)
    return RocResult(method, points, auc, time.perf_counter() - t0, cache.scorer.evaluations, first or {})


def faithfulness(task: PlantedTask, mask: Iterable[Edge], policy: PrecisionPolicy = FP32_POLICY) -> float:
    """(M_circuit - M_corrupt) / (M_model - M_corrupt) on mean logit difference."""
    mask = frozenset(mask)
    full = ComputationalGraph.full(task.weights.config)
    if not mask <= full.present:
        raise ValueError("mask contains edges outside the graph")
    m_model = float(np.mean(task_metric(task, None, policy)))
    m_corrupt = float(np.mean(task_metric(task, frozenset(), policy)))
    m_circ = float(np.mean(task_metric(task, mask, policy)))
    denom = m_model - m_corrupt
    if abs(denom) < 1e-9:
        raise ValueError("degenerate task: model and corrupt metrics coincide")
    return (m_circ - m_corrupt) / denom


def accuracy(task: PlantedTask, mask=None, policy: PrecisionPolicy = FP32_POLICY, weights: WeightSet | None = None) -> float:
    """Fraction of items whose logit difference is positive."""
    return float(np.mean(task_metric(task, mask, policy, weights) > 0))


# ------------------------------------------------------- incremental quantization


@dataclass(frozen=True)
class SweepStep:
    phase: int
    step: int
    label: str
    accuracy: float


def circuit_heads(mask: Iterable[Edge]) -> set[tuple[int, int]]:
    out = set()
    for e in mask:
        for n in (e.src, e.dst):
            if n.is_head:
                out.add((n.layer, n.head))
    return out


def _cast_head_elements(ws: WeightSet, head: tuple[int, int], select: dict) -> WeightSet:
    """Cast the selected elements of one head's Q/K/V columns and W_O rows to E4M3."""
    l, h = head
    dk = ws.config.d_k
    lw = ws.layers[l]
    mats = {"W_Q": np.array(lw.W_Q), "W_K": np.array(lw.W_K), "W_V": np.array(lw.W_V), "W_O": np.array(lw.W_O)}
    s = slice(h * dk, (h + 1) * dk)
    for name, idx in select.items():
        view = mats[name][s, :] if name == "W_O" else mats[name][:, s]
        flat = view.reshape(-1).copy()
        flat[idx] = round_f8(flat[idx])
        if name == "W_O":
            mats[name][s, :] = flat.reshape(view.shape)
        else:
            mats[name][:, s] = flat.reshape(view.shape)
    return ws.replace_layer(l, **mats)


def incremental_quant_sweep(task: PlantedTask, mask: Iterable[Edge], seed: int = 0, increments: int = 10) -> list[SweepStep]:
    """Accuracy while heads' weights are cast to FP8, non-critical heads first.

    Phase 1 casts every head outside the circuit, one head at a time in
    reverse topological order. Phase 2 casts the circuit's heads in equal
    element-count increments chosen by a seeded permutation.
    """
    mask = frozenset(mask)
    cfg = task.weights.config
    critical = circuit_heads(mask)
    ws = task.weights
    steps = [SweepStep(0, 0, "fp32", accuracy(task, mask, weights=ws))]
    order = [(l, h) for l in range(cfg.n_layers) for h in range(cfg.n_heads)][::-1]
    names = ("W_Q", "W_K", "W_V", "W_O")
    n_el = cfg.d_model * cfg.d_k
    for i, hd in enumerate([hd for hd in order if hd not in critical], 1):
        ws = _cast_head_elements(ws, hd, {n: np.arange(n_el) for n in names})
        steps.append(SweepStep(1, i, f"a{hd[0]}.{hd[1]}", accuracy(task, mask, weights=ws)))
    elems = [(hd, n, j) for hd in sorted(critical) for n in names for j in range(n_el)]
    perm = np.random.default_rng(seed).permutation(len(elems))
    bounds = np.linspace(0, len(elems), increments + 1).round().astype(int)
    for k in range(1, increments + 1):
        chosen = [elems[i] for i in perm[bounds[k - 1] : bounds[k]]]
        by_head: dict = {}
        for hd, n, j in chosen:
            by_head.setdefault(hd, {}).setdefault(n, []).append(j)
        for hd, sel in by_head.items():
            ws = _cast_head_elements(ws, hd, {n: np.array(v) for n, v in sel.items()})
        steps.append(SweepStep(2, k, f"{100 * k // increments}%", accuracy(task, mask, weights=ws)))
    return steps


def phase_drops(steps: Sequence[SweepStep]) -> tuple[float, float]:
    """Largest accuracy drop inside each phase, measured from the phase's starting accuracy."""
    start = steps[0].accuracy
    p1 = [s.accuracy for s in steps if s.phase == 1]
    drop1 = start - min(p1) if p1 else 0.0
    p2_start = p1[-1] if p1 else start
    p2 = [s.accuracy for s in steps if s.phase == 2]
    drop2 = p2_start - min(p2) if p2 else 0.0
    return max(drop1, 0.0), max(drop2, 0.0)


# ----------------------------------------------------------- precision ablation


@dataclass(frozen=True)
class AblationRow:
    precision: int
    auc: float
    accuracy: float


def precision_ablation(tasks: Sequence[PlantedTask], precisions: Sequence[int] = (4, 8, 16),
                       thresholds: Sequence[float] | None = None, base: PruneConfig | None = None,
                       tau_for_accuracy: float = 0.01) -> list[AblationRow]:
    """Mean AUC and circuit accuracy of per-head ACDC with the non-target precision varied."""
    thresholds = list(thresholds or threshold_grid(*DEFAULT_GRID))
    rows = []
    for p in precisions:
        aucs, accs = [], []
        for task in tasks:
            res = roc_sweep(task, "pahq", thresholds, base, low=p)
            aucs.append(res.auc)
            cfg = base or PruneConfig(tau=tau_for_accuracy)
            circ = run_acdc(ComputationalGraph.full(task.weights.config), task.weights, task.dataset,
                            PruneConfig(tau_for_accuracy, None, cfg.max_steps, cfg.change_rate_eps, cfg.metric, cfg.score_mode),
                            make_provider("pahq", p))
            uniform = PrecisionPolicy(None, Precision(p), Precision(16) if p >= 8 else Precision(p), Precision.P32, Precision.P32)
            accs.append(accuracy(task, circ.mask, uniform))
        rows.append(AblationRow(int(p), float(np.mean(aucs)), float(np.mean(accs))))
    return rows


# ----------------------------------------------------------------- diagnostics


def planted_edge(task: PlantedTask) -> Edge:
    return Edge(Head(*task.readout_head), UNEMBED)


def underflow_diagnostic(task: PlantedTask, tau: float = 0.001) -> dict:
    """First-iteration scores of the readout edge under each method, plus the FP8 image of its deltas."""
    edge = planted_edge(task)
    graph = ComputationalGraph.full(task.weights.config)
    scores = {}
    for m in ("acdc", "rtn8", "pahq"):
        res = run_acdc(graph, task.weights, task.dataset, PruneConfig(tau=tau, max_steps=1), make_provider(m))
        scores[m] = res.iterations[0].scores[edge]
    batch = Batch.from_pairs(task.dataset)
    node = Head(*task.readout_head)
    _, clean = forward(graph, task.weights, batch.clean, FP32_POLICY)
    _, corrupt = forward(graph, task.weights, batch.corrupt, FP32_POLICY)
    delta = clean.outputs[node] - corrupt.outputs[node]
    return {
        "edge": str(edge),
        "scores": scores,
        "max_abs_delta_fp32": float(np.max(np.abs(delta))),
        "fp8_delta_codes_nonzero": int(np.count_nonzero(encode_f8(delta) & 0x7F)),
        "below_step": bool(np.max(np.abs(delta)) < F8_MIN_NORMAL),
    }


def mantissa_diagnostic(task: PlantedTask) -> dict:
    """Absorption of the readout signal by the interference head under FP8 sums.

    Reads the two contributions at the answer's readout dimension of the
    last position, checks that ``add_f8`` returns the interference value
    unchanged, and checks that the per-head FP32 path reproduces the target
    head's activations bit for bit.
    """
    if task.interference_head is None:
        raise ValueError("task has no interference head")
    ws = task.weights
    graph = ComputationalGraph.full(ws.config)
    batch = Batch.from_pairs(task.dataset)
    rows = np.arange(len(task.dataset))
    lay = Layout.for_config(ws.config, _n_keys(task))
    dims = lay.readout + 2 * batch.answer
    sig_node, int_node = Head(*task.readout_head), Head(*task.interference_head)

    _, low = forward(graph, ws, batch.clean, RTN8_POLICY)
    s8 = low.outputs[sig_node][rows, -1, dims]
    c8 = low.outputs[int_node][rows, -1, dims]
    summed = add_f8(encode_f8(c8), encode_f8(s8))
    absorbed = bool(np.all(summed == encode_f8(c8)) and np.all(s8 != 0))
    gaps = f8_exponent(encode_f8(c8)) - f8_exponent(encode_f8(s8))

    policy = policy_for_edge(Edge(sig_node, UNEMBED))
    _, mixed = forward(graph, ws, batch.clean, policy)
    # recompute the target head at FP32 from the mixed run's own input
    inp = _node_input(graph, ws, mixed, sig_node)
    lw = ws.layers[sig_node.layer]
    z_ref, out_ref = head_forward(layer_norm(inp, lw.ln1_g, lw.ln1_b), ws, sig_node.layer, sig_node.head, Precision.P32)
    exact = bool(np.array_equal(z_ref, mixed.head_z[sig_node]) and np.array_equal(out_ref, mixed.outputs[sig_node]))
    s32 = mixed.outputs[sig_node][rows, -1, dims].astype(np.float64)
    rel = float(np.max(np.abs(s32 - out_ref[rows, -1, dims]) / np.abs(out_ref[rows, -1, dims])))
    resid = mixed.outputs[sig_node][rows, -1, dims] + mixed.outputs[int_node][rows, -1, dims]
    recovered = resid.astype(np.float32) - mixed.outputs[int_node][rows, -1, dims]
    return {
        "min_exponent_gap": int(np.min(gaps)),
        "fp8_absorbed": absorbed,
        "target_slice_exact": exact,
        "target_rel_error": rel,
        "fp32_sum_keeps_signal": bool(np.all(recovered != 0)),
    }


def _n_keys(task: PlantedTask) -> int:
    return len({p.answer for p in task.dataset} | {p.distractor for p in task.dataset})


def _node_input(graph, ws, cache, node):
    shape = cache.logits.shape[:2] + (ws.config.d_model,)
    return node_input(graph, node, cache.outputs, None, None, cache.policy.residual, shape)


# -------------------------------------------------------------------- reports


@dataclass
class RunReport:
    method: str
    config: dict
    seed: int
    roc_points: list = field(default_factory=list)
    auc: float | None = None
    circuit: list = field(default_factory=list)
    runtime_s: float = 0.0
    peak_resident_bytes: int = 0
    epsilon_precision: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.auc is not None and not 0.0 <= self.auc <= 1.0:
            raise ValueError(f"auc {self.auc} outside [0, 1]")

    def as_dict(self, deterministic: bool = False) -> dict:
        d = asdict(self)
        d["roc_points"] = [asdict(p) if isinstance(p, RocPoint) else p for p in self.roc_points]
        if deterministic:
            d["runtime_s"] = 0.0
            d["extra"] = _zero_wall_clock(d["extra"])
        return d


def _zero_wall_clock(obj):
    if isinstance(obj, dict):
        return {k: (0.0 if k.endswith("wall_s") or k == "runtime_s" else _zero_wall_clock(v)) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_zero_wall_clock(v) for v in obj]
    return obj


def peak_resident_bytes(method: str, cfg) -> int:
    fp = footprint(cfg)
    if method == "acdc":
        return fp["fp32_bytes"]
    if method == "rtn8":
        return fp["fp8_bytes"]
    return fp["device_bytes"]


def epsilon_summary(fp32_table: dict, method_table: dict) -> dict:
    if not fp32_table or not method_table:
        return {}
    gaps = np.array([abs(fp32_table[e] - method_table[e]) for e in fp32_table if e in method_table])
    return {"mean": float(gaps.mean()), "max": float(gaps.max()), "edges": int(gaps.size)}
