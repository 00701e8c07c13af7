"""Three-stream execution of one attention layer per step, and its timing model.

A step evaluates one policy: every head of the target's layer at low
precision, the target head at FP32 from a freshly loaded bundle, then the
mixed assembly. Ops and their dependencies are built once by
``build_ops``; the discrete-event simulator replays them with modelled
durations and the threaded executor runs them for real, pacing each op to
its modelled duration.

Stream configurations:

=========  ====================  ============================
config     transfer              low / high compute
=========  ====================  ============================
none       before compute        one stream, low then high
load       alongside low         one stream, low then high
compute    before compute        two streams in parallel
both       alongside low         two streams; high after load
=========  ====================  ============================
"""

from __future__ import annotations

import csv
import queue
import statistics
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import Edge, ModelConfig
from .model import head_attend, head_output, head_qkv, layer_norm
from .numerics import Precision
from .pahq import (
    BUNDLE_PARTS,
    PrecisionPolicy,
    WeightStore,
    bundle_bytes,
    concat_heads,
    head_weights,
    make_prefetch_plan,
    mixed_assembly,
)

LOAD, LOW, HIGH, COORD = "load", "compute_low", "compute_high", "coordinator"


class SchedulerError(RuntimeError):
    pass


class DeadlockError(SchedulerError):
    pass


class BundleLoadError(SchedulerError):
    pass


@dataclass(frozen=True)
class StreamConfig:
    enable_load_stream: bool
    enable_split_compute: bool

    @property
    def name(self) -> str:
        return {(False, False): "none", (True, False): "load", (False, True): "compute", (True, True): "both"}[
            (self.enable_load_stream, self.enable_split_compute)
        ]

    @classmethod
    def parse(cls, name: str) -> "StreamConfig":
        table = {"none": (False, False), "load": (True, False), "compute": (False, True), "both": (True, True)}
        if name not in table:
            raise ValueError(f"unknown stream config {name!r}; expected one of {sorted(table)}")
        return cls(*table[name])


ALL_STREAM_CONFIGS = tuple(StreamConfig.parse(n) for n in ("none", "load", "compute", "both"))


@dataclass(frozen=True)
class TimingModel:
    transfer_bytes_per_sec: float
    low_flops_per_sec: float
    high_flops_per_sec: float
    sync_overhead_sec: float = 0.0

    def __post_init__(self):
        for name in ("transfer_bytes_per_sec", "low_flops_per_sec", "high_flops_per_sec"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.sync_overhead_sec < 0:
            raise ValueError("sync_overhead_sec must be non-negative")


@dataclass(frozen=True)
class StepCosts:
    t_transfer: float
    t_low: float
    t_high: float
    overhead: float = 0.0


def head_flops(cfg: ModelConfig, batch: int, seq: int) -> float:
    """Multiply-adds x2 for one head: Q/K/V projections, scores, mixing, output rows."""
    d, dk = cfg.d_model, cfg.d_k
    proj = 3 * 2 * batch * seq * d * dk
    attn = 2 * 2 * batch * seq * seq * dk
    out = 2 * batch * seq * dk * d
    return float(proj + attn + out)


def step_costs(cfg: ModelConfig, tm: TimingModel, batch: int, seq: int, resident: bool = False) -> StepCosts:
    hf = head_flops(cfg, batch, seq)
    t_tr = 0.0 if resident else bundle_bytes(cfg) / tm.transfer_bytes_per_sec
    return StepCosts(t_tr, cfg.n_heads * hf / tm.low_flops_per_sec, hf / tm.high_flops_per_sec, tm.sync_overhead_sec)


def closed_form(c: StepCosts, streams: StreamConfig) -> float:
    if streams.enable_load_stream and streams.enable_split_compute:
        t = max(c.t_low, c.t_transfer + c.t_high)
    elif streams.enable_load_stream:
        t = max(c.t_low, c.t_transfer) + c.t_high
    elif streams.enable_split_compute:
        t = c.t_transfer + max(c.t_low, c.t_high)
    else:
        t = c.t_transfer + c.t_low + c.t_high
    return t + c.overhead


# ------------------------------------------------------------------ op graph


@dataclass(frozen=True)
class Op:
    name: str
    stream: str
    duration: float
    deps: tuple[str, ...]
    step: int
    kind: str  # load | low | high | assemble
    part: str | None = None


def build_ops(steps: Sequence[StepCosts], streams: StreamConfig, components: int = 1) -> list[Op]:
    """Ops of every step in dispatch order.

    ``components=1`` moves the bundle and computes the target head as single
    ops; ``components=4`` splits both into Q, K, V, O with a per-part sync,
    so computing Q may overlap the transfer of K.
    """
    if components not in (1, 4):
        raise ValueError("components must be 1 or 4")
    parts = BUNDLE_PARTS if components == 4 else ("QKVO",)
    high_parts = ("Q", "K", "V") if components == 4 else ("QKV",)
    ops: list[Op] = []
    prev: tuple[str, ...] = ()
    high_stream = HIGH if streams.enable_split_compute else LOW
    for t, c in enumerate(steps):
        loads = [f"s{t}.load.{p}" for p in parts]
        for name, p in zip(loads, parts):
            ops.append(Op(name, LOAD, c.t_transfer / len(parts), prev, t, "load", p))
        low_deps = prev if streams.enable_load_stream else tuple(loads)
        low = f"s{t}.low"
        ops.append(Op(low, LOW, c.t_low, low_deps, t, "low"))
        highs = []
        for i, hp in enumerate(high_parts):
            need = loads[i] if components == 4 else loads[0]
            deps = (need,)
            if not streams.enable_split_compute:
                deps = deps + (low,)
            if not streams.enable_load_stream:
                deps = tuple(dict.fromkeys(deps + tuple(loads)))
            name = f"s{t}.high.{hp}"
            ops.append(Op(name, high_stream, c.t_high / len(high_parts), deps, t, "high", hp))
            highs.append(name)
        asm = f"s{t}.assemble"
        ops.append(Op(asm, COORD, c.overhead, tuple([low, *highs, *loads]), t, "assemble"))
        prev = (asm,)
    return ops


@dataclass(frozen=True)
class Event:
    stream: str
    op: str
    start: float
    end: float


@dataclass
class Timeline:
    events: list[Event]

    @property
    def makespan(self) -> float:
        if not self.events:
            return 0.0
        return max(e.end for e in self.events) - min(e.start for e in self.events)

    def by_op(self) -> dict[str, Event]:
        return {e.op: e for e in self.events}

    def step_times(self) -> list[float]:
        ends: dict[int, float] = {}
        for e in self.events:
            s = int(e.op.split(".")[0][1:])
            ends[s] = max(ends.get(s, 0.0), e.end)
        origin = min((e.start for e in self.events), default=0.0)
        out, last = [], origin
        for s in sorted(ends):
            out.append(ends[s] - last)
            last = ends[s]
        return out

    def validate(self, ops: Sequence[Op], slack: float = 0.0) -> list[str]:
        """Violations of stream exclusivity and dependency order (empty when legal)."""
        errs = []
        per: dict[str, list[Event]] = {}
        for e in self.events:
            if e.end < e.start:
                errs.append(f"{e.op} ends before it starts")
            per.setdefault(e.stream, []).append(e)
        for stream, evs in per.items():
            evs = sorted(evs, key=lambda e: (e.start, e.end))
            for a, b in zip(evs, evs[1:]):
                if b.start < a.end - slack:
                    errs.append(f"{stream}: {a.op} overlaps {b.op}")
        ev = self.by_op()
        for op in ops:
            if op.name not in ev:
                errs.append(f"{op.name} missing from trace")
                continue
            for d in op.deps:
                if d in ev and ev[op.name].start < ev[d].end - slack:
                    errs.append(f"{op.name} started before dependency {d} finished")
        return errs

    def write_csv(self, path) -> None:
        origin = min((e.start for e in self.events), default=0.0)
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stream", "op", "start_ns", "end_ns"])
            for e in sorted(self.events, key=lambda e: (e.start, e.stream)):
                w.writerow([e.stream, e.op, int(round((e.start - origin) * 1e9)), int(round((e.end - origin) * 1e9))])


def simulate_ops(ops: Sequence[Op]) -> Timeline:
    """Discrete-event replay: each stream runs its ops in dispatch order, each op
    starts once its stream is free and all dependencies have finished."""
    free: dict[str, float] = {}
    end: dict[str, float] = {}
    events = []
    for op in ops:
        start = max([free.get(op.stream, 0.0)] + [end[d] for d in op.deps])
        fin = start + op.duration
        free[op.stream] = fin
        end[op.name] = fin
        events.append(Event(op.stream, op.name, start, fin))
    return Timeline(events)


def simulate(steps: Sequence[StepCosts], streams: StreamConfig, components: int = 1) -> tuple[list[float], float]:
    tl = simulate_ops(build_ops(steps, streams, components))
    return tl.step_times(), tl.makespan


def plan_costs(order: Sequence[Edge], cfg: ModelConfig, tm: TimingModel, batch: int, seq: int) -> list[StepCosts]:
    """Per-step costs for sweeping ``order``; steps reusing a resident bundle move nothing."""
    plan = make_prefetch_plan(order)
    resident = [False] + [e.resident for e in plan.entries]
    return [step_costs(cfg, tm, batch, seq, r) for r in resident]


def simulate_plan(order: Sequence[Edge], cfg: ModelConfig, tm: TimingModel, streams: StreamConfig,
                  batch: int = 1, seq: int | None = None, components: int = 1) -> tuple[list[float], float]:
    return simulate(plan_costs(order, cfg, tm, batch, seq or cfg.seq_len), streams, components)


# ------------------------------------------------------------------ executor


@dataclass
class StepResult:
    assembled: np.ndarray  # B x S x H x d_k, FP32
    concat: np.ndarray  # B x S x d_model
    output: np.ndarray  # B x S x d_model, sum of per-head outputs
    trace: Timeline


class _Worker(threading.Thread):
    def __init__(self, name: str):
        super().__init__(name=f"stream-{name}", daemon=True)
        self.q: queue.Queue = queue.Queue()

    def run(self):
        while True:
            job = self.q.get()
            if job is None:
                return
            job()


class ThreeStreamExecutor:
    """Three long-lived workers (load, low, high) driven by the calling thread."""

    def __init__(self, store: WeightStore, watchdog_s: float = 30.0):
        self.store = store
        self.watchdog_s = watchdog_s
        self.workers = {s: _Worker(s) for s in (LOAD, LOW, HIGH)}
        for w in self.workers.values():
            w.start()
        self._closed = False

    def close(self) -> None:
        if not self._closed:
            for w in self.workers.values():
                w.q.put(None)
            for w in self.workers.values():
                w.join(timeout=5)
            self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def execute_step(self, policy: PrecisionPolicy, x: np.ndarray, streams: StreamConfig,
                     costs: StepCosts | None = None, components: int = 4, pace: bool = True,
                     jitter: np.random.Generator | None = None, max_jitter_s: float = 0.0) -> StepResult:
        """Attention of the target's layer under ``policy``; returns values and the real trace.

        Values never depend on ``streams``, pacing or jitter.
        """
        tgt = policy.target
        if tgt is None or not tgt.is_head:
            raise SchedulerError("execute_step needs a policy whose target is a head")
        costs = costs or StepCosts(0.0, 0.0, 0.0)
        layer, head = tgt.layer, tgt.head
        cfg = self.store.config
        ws = self.store.host
        lw = ws.layers[layer]
        x_ln = layer_norm(x, lw.ln1_g, lw.ln1_b)
        slot, needed = self.store.acquire((layer, head))
        if not needed:
            costs = StepCosts(0.0, costs.t_low, costs.t_high, costs.overhead)
        ops = build_ops([costs], streams, components)
        parts_of = {"QKVO": BUNDLE_PARTS}
        low_p = policy.attention
        res: dict = {}
        hi: dict = {}

        def do_load(op: Op):
            if not needed:
                return
            for p in parts_of.get(op.part, (op.part,)):
                try:
                    self.store.load_part(slot, p)
                except Exception as exc:  # surfaced to the coordinator
                    raise BundleLoadError(f"loading {p} of head {tgt}: {exc}") from exc

        def wait_part(p: str):
            if not slot.part_ready[p].wait(self.watchdog_s):
                raise DeadlockError(f"part {p} of {tgt} never became ready")
            return slot.parts[p]

        def do_low(op: Op):
            zs = []
            for h in range(cfg.n_heads):
                wq, wk, wv, _ = head_weights(ws, layer, h, low_p)
                q, k, v = head_qkv(x_ln, wq, wk, wv, low_p)
                zs.append(head_attend(q, k, v))
            res["low"] = np.stack(zs, axis=2)

        def do_high(op: Op):
            names = {"QKV": ("Q", "K", "V")}.get(op.part, (op.part,))
            for p in names:
                w = wait_part(p)
                hi[p] = (x_ln @ w).astype(np.float32)
            if "V" in names:
                res["high"] = head_attend(hi["Q"], hi["K"], hi["V"])

        fns = {"load": do_load, "low": do_low, "high": do_high}
        trace = self._run(ops, fns, pace, jitter, max_jitter_s)

        assembled = mixed_assembly(res["low"], res["high"], head)
        out = None
        for h in range(cfg.n_heads):
            if h == head:
                contrib = head_output(assembled[:, :, h, :], wait_part("O"), Precision.P32)
            else:
                contrib = head_output(assembled[:, :, h, :], head_weights(ws, layer, h, low_p)[3], low_p)
            out = contrib if out is None else out + contrib
        return StepResult(assembled, concat_heads(assembled), out, trace)

    def _run(self, ops: Sequence[Op], fns: dict, pace: bool, jitter, max_jitter_s: float) -> Timeline:
        done = {op.name: threading.Event() for op in ops}
        events: list[Event] = []
        errors: list[BaseException] = []
        lock = threading.Lock()
        t0 = time.perf_counter()
        delays = {op.name: (float(jitter.uniform(0, max_jitter_s)) if jitter is not None and max_jitter_s > 0 else 0.0) for op in ops}

        def job(op: Op):
            def run():
                try:
                    for d in op.deps:
                        if not done[d].wait(self.watchdog_s):
                            raise DeadlockError(f"{op.name} timed out waiting for {d}")
                    if errors:
                        return
                    if delays[op.name]:
                        time.sleep(delays[op.name])
                    start = time.perf_counter()
                    fn = fns.get(op.kind)
                    if fn is not None:
                        fn(op)
                    if pace and op.duration > 0:
                        remaining = start + op.duration - time.perf_counter()
                        if remaining > 0:
                            time.sleep(remaining)
                    end = time.perf_counter()
                    with lock:
                        events.append(Event(op.stream, op.name, start - t0, end - t0))
                except BaseException as exc:
                    with lock:
                        errors.append(exc)
                finally:
                    done[op.name].set()

            return run

        for op in ops:
            if op.stream == COORD:
                continue
            self.workers[op.stream].q.put(job(op))
        for op in ops:
            if op.stream == COORD:
                job(op)()
        if errors:
            raise errors[0]
        return Timeline(events)


# -------------------------------------------------------------------- ablation


@dataclass(frozen=True)
class Workload:
    policies: tuple[PrecisionPolicy, ...]
    inputs: tuple[np.ndarray, ...]  # one layer input per step
    costs: tuple[StepCosts, ...]


def calibrated_costs(t_transfer: float, t_low: float, t_high: float, cfg: ModelConfig, batch: int, seq: int,
                     measured: dict | None = None, margin: float = 3.0) -> tuple[TimingModel, StepCosts]:
    """Timing model whose op durations are the requested ones, raised if needed so
    every op lasts at least ``margin`` times its measured compute time."""
    if measured:
        scale = max(
            1.0,
            margin * measured.get("low", 0.0) / t_low if t_low else 1.0,
            margin * measured.get("high", 0.0) / t_high if t_high else 1.0,
            margin * measured.get("load", 0.0) / t_transfer if t_transfer else 1.0,
        )
        t_transfer, t_low, t_high = t_transfer * scale, t_low * scale, t_high * scale
    hf = head_flops(cfg, batch, seq)
    tm = TimingModel(bundle_bytes(cfg) / t_transfer, cfg.n_heads * hf / t_low, hf / t_high)
    return tm, StepCosts(t_transfer, t_low, t_high)


def measure_ops(store: WeightStore, policy: PrecisionPolicy, x: np.ndarray, repeats: int = 5) -> dict:
    """Median real duration of each op kind, run unpaced and unoverlapped."""
    times = {"load": [], "low": [], "high": []}
    with ThreeStreamExecutor(store) as ex:
        for _ in range(repeats):
            r = ex.execute_step(policy, x, StreamConfig(False, False), pace=False, components=1)
            for e in r.trace.events:
                kind = e.op.split(".")[1]
                if kind in times:
                    times[kind].append(e.end - e.start)
            store.evict_all()
    return {k: statistics.median(v) if v else 0.0 for k, v in times.items()}


@dataclass(frozen=True)
class AblationResult:
    config: str
    simulated_s: float
    closed_form_s: float
    wall_median_s: float
    wall_runs: tuple[float, ...]


def ablate(store: WeightStore, workload: Workload, repeats: int = 10,
           configs: Sequence[StreamConfig] = ALL_STREAM_CONFIGS, components: int = 1) -> list[AblationResult]:
    """Wall-clock and simulated makespans of the workload under each stream config."""
    rows = []
    with ThreeStreamExecutor(store) as ex:
        for sc in configs:
            _, sim = simulate(workload.costs, sc, components)
            cf = sum(closed_form(c, sc) for c in workload.costs)
            walls = []
            for _ in range(repeats):
                store.evict_all()
                t0 = time.perf_counter()
                for pol, x, c in zip(workload.policies, workload.inputs, workload.costs):
                    ex.execute_step(pol, x, sc, c, components=components)
                walls.append(time.perf_counter() - t0)
            rows.append(AblationResult(sc.name, sim, cf, statistics.median(walls), tuple(walls)))
    return rows


def write_ablation_csv(rows: Sequence[AblationResult], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "simulated_s", "closed_form_s", "wall_median_s"])
        for r in rows:
            w.writerow([r.config, repr(r.simulated_s), repr(r.closed_form_s), repr(r.wall_median_s)])
