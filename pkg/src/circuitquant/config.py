"""Run specifications: YAML config files merged with command-line flags."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import yaml

COMMANDS = ("gen-task", "run-acdc", "sweep-roc", "ablate-scheduler", "ablate-precision", "quant-sweep", "demo-underflow")
NEEDS_TASK = {"run-acdc", "sweep-roc", "ablate-precision", "quant-sweep"}


class ConfigFileError(ValueError):
    """Config could not be parsed or failed validation; the message lists every problem."""


@dataclass
class RunSpec:
    command: str
    out: str = "out"
    task: str | None = None
    weights: str | None = None
    dataset: str | None = None
    method: str = "pahq"
    tau: float = 0.01
    delta: float | None = None
    max_steps: int = 10
    eps: float = 0.0
    metric: str = "logitdiff"
    score_mode: str = "loss"
    streams: str | None = None  # None runs every stream configuration
    seed: int = 0
    thresholds: tuple = (0.001, 3.16, 21)
    precision: int | None = None
    heads_only: bool = False
    deterministic_report: bool = False
    # planted-task generation
    layers: int = 2
    heads: int = 4
    d_model: int = 32
    seq_len: int = 4
    items: int = 8
    signal_scale: float = 0.25
    interference: float = 0.0
    # scheduler ablation
    repeats: int = 10
    steps: int = 4

    def as_dict(self) -> dict:
        d = asdict(self)
        d["thresholds"] = list(self.thresholds)
        return d


FIELD_NAMES = {f.name for f in fields(RunSpec)}


def parse_thresholds(value) -> tuple:
    if isinstance(value, str):
        parts = [p.strip() for p in value.split(",")]
    else:
        parts = list(value)
    if len(parts) != 3:
        raise ValueError("thresholds must be lo,hi,n")
    return (float(parts[0]), float(parts[1]), int(parts[2]))


def read_config_file(path) -> dict:
    """Mapping from a YAML (or JSON) file; a saved run report contributes its ``config`` block."""
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark is not None else "unknown position"
        raise ConfigFileError(f"{p}: parse error at {where}: {exc.problem}") from exc
    except yaml.YAMLError as exc:
        raise ConfigFileError(f"{p}: parse error: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigFileError(f"{p}: top level must be a mapping")
    if "schema_version" in data and isinstance(data.get("config"), dict):
        data = data["config"]
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def validate(spec: RunSpec) -> list[str]:
    errs = []
    if spec.command not in COMMANDS:
        errs.append(f"command: unknown command {spec.command!r}")
    if spec.method not in ("acdc", "rtn8", "pahq"):
        errs.append(f"method: must be acdc, rtn8 or pahq, got {spec.method!r}")
    if not isinstance(spec.tau, (int, float)) or spec.tau < 0:
        errs.append(f"tau: must be a non-negative number, got {spec.tau!r}")
    if spec.delta is not None and (not isinstance(spec.delta, (int, float)) or spec.delta <= 0):
        errs.append(f"delta: must be positive, got {spec.delta!r}")
    if not isinstance(spec.max_steps, int) or spec.max_steps < 1:
        errs.append(f"max_steps: must be an integer >= 1, got {spec.max_steps!r}")
    if not isinstance(spec.eps, (int, float)) or not 0 <= spec.eps < 1:
        errs.append(f"eps: must lie in [0, 1), got {spec.eps!r}")
    if spec.metric not in ("kl", "logitdiff"):
        errs.append(f"metric: must be kl or logitdiff, got {spec.metric!r}")
    if spec.score_mode not in ("loss", "act"):
        errs.append(f"score_mode: must be loss or act, got {spec.score_mode!r}")
    if spec.streams is not None and spec.streams not in ("none", "load", "compute", "both"):
        errs.append(f"streams: must be none, load, compute or both, got {spec.streams!r}")
    if spec.precision is not None and spec.precision not in (4, 8, 16):
        errs.append(f"precision: must be 4, 8 or 16, got {spec.precision!r}")
    try:
        lo, hi, n = parse_thresholds(spec.thresholds)
        if not (0 < lo < hi) or n < 2:
            errs.append(f"thresholds: need 0 < lo < hi and n >= 2, got {spec.thresholds!r}")
    except (TypeError, ValueError) as exc:
        errs.append(f"thresholds: {exc}")
    for name in ("layers", "heads", "d_model", "seq_len", "items", "repeats", "steps"):
        v = getattr(spec, name)
        if not isinstance(v, int) or v < 1:
            errs.append(f"{name}: must be a positive integer, got {v!r}")
    if not isinstance(spec.signal_scale, (int, float)) or spec.signal_scale < 0:
        errs.append(f"signal_scale: must be non-negative, got {spec.signal_scale!r}")
    if not isinstance(spec.interference, (int, float)) or spec.interference < 0:
        errs.append(f"interference: must be non-negative, got {spec.interference!r}")
    if spec.command in NEEDS_TASK:
        w, d = resolve_paths(spec)
        for label, path in (("weights", w), ("dataset", d)):
            if path is None:
                errs.append(f"{label}: required for {spec.command} (give --{label} or --task)")
            elif not Path(path).exists():
                errs.append(f"{label}: {path} does not exist")
    return errs


def resolve_paths(spec: RunSpec) -> tuple[str | None, str | None]:
    w, d = spec.weights, spec.dataset
    if spec.task:
        w = w or str(Path(spec.task) / "weights.bin")
        d = d or str(Path(spec.task) / "dataset.jsonl")
    return w, d


def load_config(path, overrides: dict | None = None, command: str | None = None) -> RunSpec:
    """RunSpec from a config file with ``overrides`` (flags) taking precedence."""
    values = read_config_file(path) if path else {}
    return build_spec(values, overrides or {}, command)


def build_spec(file_values: dict, overrides: dict, command: str | None = None) -> RunSpec:
    errs = [f"{k}: unknown setting" for k in file_values if k not in FIELD_NAMES]
    merged = {k: v for k, v in file_values.items() if k in FIELD_NAMES}
    merged.update({k: v for k, v in overrides.items() if v is not None and k in FIELD_NAMES})
    if command:
        merged["command"] = command
    if "command" not in merged:
        errs.append("command: missing")
        raise ConfigFileError("; ".join(errs))
    if "thresholds" in merged:
        try:
            merged["thresholds"] = parse_thresholds(merged["thresholds"])
        except (TypeError, ValueError) as exc:
            errs.append(f"thresholds: {exc}")
            merged.pop("thresholds")
    spec = RunSpec(**merged)
    errs += validate(spec)
    if errs:
        raise ConfigFileError("invalid configuration: " + "; ".join(errs))
    return spec
