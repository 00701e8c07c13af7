from __future__ import annotations

import json

import pytest

from circuitquant.config import ConfigFileError, RunSpec, build_spec, load_config, parse_thresholds, read_config_file


@pytest.fixture
def task_dir(tmp_path):
    d = tmp_path / "task"
    d.mkdir()
    (d / "weights.bin").write_bytes(b"")
    (d / "dataset.jsonl").write_text("")
    return d


def test_empty_file_plus_flags(tmp_path, task_dir):
    f = tmp_path / "empty.yaml"
    f.write_text("")
    spec = load_config(f, {"task": str(task_dir), "method": "rtn8", "tau": 0.2, "max_steps": 3}, "run-acdc")
    assert (spec.method, spec.tau, spec.max_steps) == ("rtn8", 0.2, 3)
    assert spec == RunSpec("run-acdc", task=str(task_dir), method="rtn8", tau=0.2, max_steps=3)


def test_negative_tau_names_field(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("tau: -1\n")
    with pytest.raises(ConfigFileError, match=r"tau: must be a non-negative number"):
        load_config(f, {}, "gen-task")


def test_flag_beats_file(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("tau: 0.5\nseed: 9\n")
    spec = load_config(f, {"tau": 0.25}, "gen-task")
    assert spec.tau == 0.25 and spec.seed == 9


def test_every_violation_listed(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("tau: -1\nmax-steps: 0\nmetric: mse\nbogus: 1\n")
    with pytest.raises(ConfigFileError) as info:
        load_config(f, {}, "run-acdc")
    msg = str(info.value)
    for field in ("tau:", "max_steps:", "metric:", "bogus: unknown setting", "weights: required"):
        assert field in msg


def test_parse_error_has_line(tmp_path):
    f = tmp_path / "bad.yaml"
    f.write_text("tau: 0.1\nseed: [1, 2\n")
    with pytest.raises(ConfigFileError, match=r"line \d+, column \d+"):
        read_config_file(f)


def test_report_config_block(tmp_path):
    f = tmp_path / "report.json"
    f.write_text(json.dumps({"schema_version": 1, "config": {"command": "gen-task", "seed": 4}, "auc": None}))
    assert read_config_file(f) == {"command": "gen-task", "seed": 4}
    assert load_config(f).seed == 4


def test_thresholds():
    assert parse_thresholds("0.001, 3.16, 21") == (0.001, 3.16, 21)
    assert parse_thresholds([1, 2, 3]) == (1.0, 2.0, 3)
    with pytest.raises(ValueError):
        parse_thresholds("1,2")
    with pytest.raises(ConfigFileError, match="thresholds"):
        build_spec({}, {"thresholds": "3,1,5"}, "gen-task")


def test_missing_paths_and_command():
    with pytest.raises(ConfigFileError, match="weights: .*does not exist"):
        build_spec({}, {"weights": "/nonexistent/w.bin", "dataset": "/nonexistent/d.jsonl"}, "run-acdc")
    with pytest.raises(ConfigFileError, match="command: missing"):
        build_spec({}, {}, None)
