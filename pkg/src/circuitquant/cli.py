"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 file or dataset error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from .acdc import PruneConfig, ScoreTableCache, run_acdc, threshold_grid, write_score_tables
from .config import COMMANDS, ConfigFileError, RunSpec, build_spec, read_config_file, resolve_paths
from .evaluation import (
    RunReport,
    epsilon_summary,
    faithfulness,
    incremental_quant_sweep,
    mantissa_diagnostic,
    peak_resident_bytes,
    phase_drops,
    precision_ablation,
    roc_sweep,
    underflow_diagnostic,
)
from .graph import UNEMBED, ComputationalGraph, ConfigError, Edge, ModelConfig, enumerate_edges
from .model import ForwardError
from .numerics import Precision
from .pahq import build_store, make_provider, policy_for_edge
from .patching import DatasetError, EdgeScorer, load_dataset, save_dataset
from .planted import ConstructionError, PlantedTask, default_config, generate_planted
from .scheduler import (
    ALL_STREAM_CONFIGS,
    StreamConfig,
    Workload,
    ablate,
    calibrated_costs,
    measure_ops,
    write_ablation_csv,
)
from .weights import WeightFileError, load_weights, random_weights, save_weights

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
UNDERFLOW_SCALE = 2.0**-11


class NumericalFailure(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    a = common.add_argument
    a("--config", help="YAML or JSON file of settings; flags override it (a saved report.json also works)")
    a("--out", help="output directory")
    a("--task", help="directory holding weights.bin, dataset.jsonl and task.json")
    a("--weights", help="weight file")
    a("--dataset", help="JSONL prompt-pair file")
    a("--method", choices=["acdc", "rtn8", "pahq"])
    a("--tau", type=float)
    a("--delta", type=float, help="threshold used in activation score mode")
    a("--max-steps", type=int)
    a("--eps", type=float, help="stop when the fraction of edges pruned is at most this")
    a("--metric", choices=["kl", "logitdiff"])
    a("--score-mode", choices=["loss", "act"])
    a("--streams", choices=["none", "load", "compute", "both"])
    a("--seed", type=int)
    a("--thresholds", help="lo,hi,n for a log-uniform grid")
    a("--precision", type=int, choices=[4, 8, 16])
    a("--heads-only", action="store_true", default=None)
    a("--deterministic-report", action="store_true", default=None, help="zero wall-clock fields in the report")
    a("--layers", type=int)
    a("--heads", type=int)
    a("--d-model", type=int)
    a("--seq-len", type=int)
    a("--items", type=int)
    a("--signal-scale", type=float)
    a("--interference", type=float)
    a("--repeats", type=int)
    a("--steps", type=int)
    p = _Parser(prog="circuitquant", description="Circuit discovery with per-head mixed precision.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "gen-task": "write a planted task (weights.bin, dataset.jsonl, task.json)",
        "run-acdc": "discover a circuit at one threshold",
        "sweep-roc": "sweep thresholds and score against the planted circuit",
        "ablate-scheduler": "time the four stream configurations",
        "ablate-precision": "ROC AUC and accuracy with the non-target precision varied",
        "quant-sweep": "accuracy while heads are cast to FP8, non-critical heads first",
        "demo-underflow": "show FP8 underflow and absorption on planted signals",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return p


def spec_from_args(argv) -> RunSpec:
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("config", "command")}
    file_values = read_config_file(args.config) if args.config else {}
    return build_spec(file_values, flags, args.command)


# ----------------------------------------------------------------- loading


def load_task(spec: RunSpec) -> PlantedTask:
    wpath, dpath = resolve_paths(spec)
    ws = load_weights(wpath)
    pairs = load_dataset(dpath)
    for i, p in enumerate(pairs, 1):
        try:
            p.validate(ws.config.vocab)
        except DatasetError as exc:
            raise DatasetError(f"{dpath}: item {i}: {exc}") from exc
        if len(p.clean) != ws.config.seq_len:
            raise DatasetError(f"{dpath}: item {i}: prompt length {len(p.clean)} != seq_len {ws.config.seq_len}")
    meta = {}
    meta_path = Path(spec.task) / "task.json" if spec.task else Path(wpath).with_name("task.json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
    truth = frozenset(Edge.parse(s) for s in meta.get("ground_truth", []))

    def head(key):
        v = meta.get(key)
        return tuple(v) if v is not None else None

    return PlantedTask(ws, tuple(pairs), truth, float(meta.get("signal_scale", 0.0)),
                       head("readout_head"), head("copy_head"), head("interference_head"), int(meta.get("seed", spec.seed)))


def prune_config(spec: RunSpec, tau: float | None = None) -> PruneConfig:
    return PruneConfig(spec.tau if tau is None else tau, spec.delta, spec.max_steps, spec.eps, spec.metric,
                       spec.score_mode, spec.heads_only)


def low_precision(spec: RunSpec) -> int:
    return spec.precision or 8


def _check_finite(values, what: str) -> None:
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size and not np.all(np.isfinite(arr)):
        raise NumericalFailure(f"non-finite {what}")


def _first_table(method: str, task: PlantedTask, spec: RunSpec) -> dict:
    graph = ComputationalGraph.full(task.weights.config)
    cfg = prune_config(spec)
    cache = ScoreTableCache(EdgeScorer(task.weights, task.dataset, cfg.metric, cfg.score_mode), make_provider(method, low_precision(spec)))
    edges = [e for e in enumerate_edges(graph) if not cfg.heads_only or e.src.is_head]
    return cache.table(graph, edges)


def _epsilon(spec: RunSpec, task: PlantedTask, method_table: dict) -> dict:
    if spec.method == "acdc":
        return {"mean": 0.0, "max": 0.0, "edges": len(method_table)}
    return epsilon_summary(_first_table("acdc", task, spec), method_table)


# ---------------------------------------------------------------- commands


def cmd_gen_task(spec: RunSpec, out: Path) -> RunReport:
    cfg = default_config(spec.layers, spec.heads, spec.d_model, spec.seq_len)
    task = generate_planted(cfg, spec.seed, spec.signal_scale, n_items=spec.items, interference=spec.interference)
    save_weights(task.weights, out / "weights.bin")
    save_dataset(task.dataset, out / "dataset.jsonl")
    meta = {
        "ground_truth": sorted(str(e) for e in task.ground_truth),
        "readout_head": list(task.readout_head),
        "copy_head": list(task.copy_head) if task.copy_head else None,
        "interference_head": list(task.interference_head) if task.interference_head else None,
        "signal_scale": task.signal_scale,
        "seed": task.seed,
    }
    (out / "task.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return RunReport("gen-task", spec.as_dict(), spec.seed, circuit=meta["ground_truth"], extra={"task": meta})


def cmd_run_acdc(spec: RunSpec, out: Path) -> RunReport:
    task = load_task(spec)
    graph = ComputationalGraph.full(task.weights.config)
    t0 = time.perf_counter()
    res = run_acdc(graph, task.weights, task.dataset, prune_config(spec), make_provider(spec.method, low_precision(spec)))
    runtime = time.perf_counter() - t0
    table = dict(res.iterations[0].scores) if res.iterations else {}
    _check_finite(table.values(), "edge scores")
    write_score_tables(res, out / "scores.csv")
    extra = {"iterations": res.n_iterations, "evaluations": res.evaluations, "edges_kept": len(res.mask)}
    if task.ground_truth:
        extra["faithfulness"] = faithfulness(task, res.mask)
    return RunReport(spec.method, spec.as_dict(), spec.seed, circuit=sorted(str(e) for e in res.mask), runtime_s=runtime,
                     peak_resident_bytes=peak_resident_bytes(spec.method, task.weights.config),
                     epsilon_precision=_epsilon(spec, task, table), extra=extra)


def cmd_sweep_roc(spec: RunSpec, out: Path) -> RunReport:
    task = load_task(spec)
    if not task.ground_truth:
        raise ConfigFileError("sweep-roc needs a task.json with the planted circuit (use --task)")
    grid = threshold_grid(*spec.thresholds)
    res = roc_sweep(task, spec.method, grid, prune_config(spec, grid[0]), low_precision(spec))
    _check_finite(res.first_table.values(), "edge scores")
    res.write_csv(out / "roc.csv")
    return RunReport(spec.method, spec.as_dict(), spec.seed, roc_points=list(res.points), auc=res.auc, runtime_s=res.runtime_s,
                     peak_resident_bytes=peak_resident_bytes(spec.method, task.weights.config),
                     epsilon_precision=_epsilon(spec, task, res.first_table), extra={"evaluations": res.evaluations})


def cmd_ablate_precision(spec: RunSpec, out: Path) -> RunReport:
    task = load_task(spec)
    if not task.ground_truth:
        raise ConfigFileError("ablate-precision needs a task.json with the planted circuit (use --task)")
    precisions = (spec.precision,) if spec.precision else (4, 8, 16)
    t0 = time.perf_counter()
    rows = precision_ablation([task], precisions, threshold_grid(*spec.thresholds), prune_config(spec), spec.tau)
    with open(out / "precision.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["precision", "auc", "accuracy"])
        for r in rows:
            w.writerow([r.precision, repr(r.auc), repr(r.accuracy)])
    return RunReport("pahq", spec.as_dict(), spec.seed, runtime_s=time.perf_counter() - t0,
                     extra={"rows": [{"precision": r.precision, "auc": r.auc, "accuracy": r.accuracy} for r in rows]})


def cmd_quant_sweep(spec: RunSpec, out: Path) -> RunReport:
    task = load_task(spec)
    graph = ComputationalGraph.full(task.weights.config)
    res = run_acdc(graph, task.weights, task.dataset, prune_config(spec), make_provider(spec.method, low_precision(spec)))
    steps = incremental_quant_sweep(task, res.mask, spec.seed)
    with open(out / "quant_sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phase", "step", "label", "accuracy"])
        for s in steps:
            w.writerow([s.phase, s.step, s.label, repr(s.accuracy)])
    d1, d2 = phase_drops(steps)
    return RunReport(spec.method, spec.as_dict(), spec.seed, circuit=sorted(str(e) for e in res.mask),
                     extra={"phase1_drop": d1, "phase2_drop": d2,
                            "steps": [{"phase": s.phase, "step": s.step, "label": s.label, "accuracy": s.accuracy} for s in steps]})


def cmd_demo_underflow(spec: RunSpec, out: Path) -> RunReport:
    cfg = default_config(spec.layers, spec.heads, spec.d_model, spec.seq_len)
    under = generate_planted(cfg, spec.seed, UNDERFLOW_SCALE, n_items=spec.items)
    mixed = generate_planted(cfg, spec.seed, 0.25, n_items=spec.items, interference=spec.interference or 64.0)
    u = underflow_diagnostic(under)
    m = mantissa_diagnostic(mixed)
    with open(out / "underflow.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "score"])
        for k, v in u["scores"].items():
            w.writerow([k, repr(v)])
    return RunReport("demo-underflow", spec.as_dict(), spec.seed, extra={"underflow": u, "mantissa": m})


def cmd_ablate_scheduler(spec: RunSpec, out: Path) -> RunReport:
    if spec.weights:
        ws = load_weights(spec.weights)
    else:
        ws = random_weights(ModelConfig.make(spec.layers, spec.heads, spec.d_model, 64, spec.seq_len), spec.seed)
    cfg = ws.config
    rng = np.random.default_rng(spec.seed)
    heads = [e.src for e in enumerate_edges(ComputationalGraph.full(cfg)) if e.src.is_head]
    targets = [heads[i % len(heads)] for i in range(spec.steps)]
    policies = tuple(policy_for_edge(Edge(h, UNEMBED), Precision(low_precision(spec))) for h in targets)
    inputs = tuple(rng.normal(size=(8, cfg.seq_len, cfg.d_model)).astype(np.float32) for _ in targets)
    store = build_store(ws)
    measured = measure_ops(store, policies[0], inputs[0])
    _, costs = calibrated_costs(0.005, 0.008, 0.002, cfg, 8, cfg.seq_len, measured)
    configs = (StreamConfig.parse(spec.streams),) if spec.streams else ALL_STREAM_CONFIGS
    rows = ablate(store, Workload(policies, inputs, (costs,) * len(targets)), spec.repeats, configs)
    write_ablation_csv(rows, out / "scheduler.csv")
    tel = store.telemetry
    return RunReport("pahq", spec.as_dict(), spec.seed, peak_resident_bytes=int(tel.peak_device_bytes), extra={
        "step_costs_s": {"transfer": costs.t_transfer, "low": costs.t_low, "high": costs.t_high},
        "configs": [{"config": r.config, "simulated_s": r.simulated_s, "closed_form_s": r.closed_form_s,
                     "median_wall_s": r.wall_median_s, "runs_wall_s": list(r.wall_runs)} for r in rows],
    })


COMMAND_FUNCS = {
    "gen-task": cmd_gen_task,
    "run-acdc": cmd_run_acdc,
    "sweep-roc": cmd_sweep_roc,
    "ablate-scheduler": cmd_ablate_scheduler,
    "ablate-precision": cmd_ablate_precision,
    "quant-sweep": cmd_quant_sweep,
    "demo-underflow": cmd_demo_underflow,
}


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (set, frozenset, tuple)):
        return sorted(obj) if isinstance(obj, (set, frozenset)) else list(obj)
    return str(obj)


def run(spec: RunSpec) -> dict:
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    report = COMMAND_FUNCS[spec.command](spec, out)
    d = report.as_dict(spec.deterministic_report)
    (out / "report.json").write_text(json.dumps(d, indent=2, sort_keys=True, default=_json_default) + "\n")
    return d


def main(argv=None) -> int:
    try:
        spec = spec_from_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_CONFIG
    except (ConfigFileError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        run(spec)
    except (ConfigFileError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, WeightFileError, DatasetError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalFailure, ForwardError, ConstructionError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK
