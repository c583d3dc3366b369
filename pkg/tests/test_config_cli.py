from __future__ import annotations

import copy
import csv
import json

import pytest

from uarl.cli import ACCEPTANCE_IDS, EXIT_FAILED, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, build_report, main
from uarl.config import ConfigError, load_config, parse_config

TINY = {
    "env": {"family": "point_mass", "horizon": 15, "nominal_params": {"noise_scale": 0.05, "friction": 0.1, "mass_mult": 1.0},
            "active_param": "mass_mult", "schedule": [1, 3, 6], "phi_t": 40.0},
    "train": {"steps": 8, "finetune_steps": 4, "batch_size": 16, "hidden": [8, 8], "eval_every": 0, "lambda_every": 4},
    "gate": {"percentile": 95.0, "id_episodes": 20},
    "data": {"nominal_episodes": 3, "repulsive_episodes": 3, "target_episodes": 2, "eval_episodes": 1},
    "seeds": {"master": 0, "target": 999},
    "output": {"root": "runs", "name": "tiny"},
}


@pytest.fixture
def runs(tmp_path, monkeypatch):
    monkeypatch.setenv("UARL_RUNS_DIR", str(tmp_path / "runs"))
    return tmp_path / "runs"


def _write(tmp_path, raw, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw))
    return str(p)


def _with(path: str, value):
    raw = copy.deepcopy(TINY)
    keys = path.split(".")
    d = raw
    for k in keys[:-1]:
        d = d[k]
    d[keys[-1]] = value
    return raw


# ---------------------------------------------------------------------------
# config validation


def test_tiny_config_parses():
    cfg = parse_config(TINY)
    assert cfg.train.steps == 8 and cfg.train.hidden == (8, 8)
    assert cfg.env.target_params.mass_mult == 40.0
    assert cfg.digest() == parse_config(copy.deepcopy(TINY)).digest()


@pytest.mark.parametrize("path,value,field", [
    ("train.gamma", "high", "train.gamma"),
    ("train.gamma", 1.0, "train.gamma"),
    ("train.hidden", [8, "x"], "train.hidden[1]"),
    ("train.bogus", 1, "train.bogus"),
    ("env.schedule", [1, "3"], "env.schedule[1]"),
    ("env.schedule", [1], "env.schedule"),
    ("env.family", "mujoco", "env.family"),
    ("env.active_param", "gravity", "env.active_param"),
    ("env.nominal_params", {"mass": 1.0}, "env.nominal_params.mass"),
    ("gate.percentile", 150.0, "gate.percentile"),
    ("gate.id_episodes", 5, "gate.id_episodes"),
    ("data.nominal_episodes", 0, "data.nominal_episodes"),
    ("seeds.master", 1.5, "seeds.master"),
    ("output.name", 3, "output.name"),
])
def test_config_errors_name_the_field(path, value, field):
    with pytest.raises(ConfigError) as info:
        parse_config(_with(path, value))
    assert info.value.path == field
    assert str(info.value).startswith(field)


def test_missing_sections_and_unknown_sections():
    with pytest.raises(ConfigError) as info:
        parse_config({k: v for k, v in TINY.items() if k != "env"})
    assert info.value.path == "env"
    with pytest.raises(ConfigError):
        parse_config({**TINY, "schedule": []})


def test_load_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_runs_dir_env_override(tmp_path, monkeypatch):
    cfg = parse_config(TINY)
    monkeypatch.delenv("UARL_RUNS_DIR", raising=False)
    assert str(cfg.run_dir()) == "runs/tiny"
    monkeypatch.setenv("UARL_RUNS_DIR", str(tmp_path))
    assert cfg.run_dir() == tmp_path / "tiny"


def test_bundled_demo_config_is_valid():
    cfg = load_config("configs/demo.json")
    assert cfg.env.spec.family == "point_mass" and cfg.env.schedule[0] == 1


# ---------------------------------------------------------------------------
# exit codes


def test_usage_errors_exit_one(tmp_path, runs, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["fly"]) == EXIT_USAGE
    assert main(["train"]) == EXIT_USAGE
    assert main(["train", "--config", str(tmp_path / "none.json")]) == EXIT_USAGE
    assert main(["train", "--config", _write(tmp_path, _with("train.gamma", "x"))]) == EXIT_USAGE
    assert "train.gamma" in capsys.readouterr().err


def test_runtime_error_exits_two(tmp_path, runs):
    # training before collection: the datasets are missing
    assert main(["train", "--config", _write(tmp_path, TINY)]) == EXIT_RUNTIME
    assert main(["report", str(tmp_path / "empty")]) == EXIT_RUNTIME


def test_oracle_exit_code_tracks_counterexamples(tmp_path, capsys):
    out = tmp_path / "certs.json"
    assert main(["oracle", "--check", "operator_perturbation", "--trials", "10", "--out", str(out)]) == EXIT_OK
    assert len(json.loads(out.read_text())) == 10
    code = main(["oracle", "--check", "critic_gap", "--trials", "20"])
    text = capsys.readouterr().out
    line = [ln for ln in text.splitlines() if ln.startswith("critic_gap")][0]
    n_bad = int(line.split(",")[1].split()[0])
    assert code == (EXIT_FAILED if n_bad else EXIT_OK)


# ---------------------------------------------------------------------------
# subcommands end to end on a tiny config


def test_step_by_step_pipeline(tmp_path, runs):
    cfg = _write(tmp_path, TINY)
    for cmd in (["collect"], ["train"], ["gate"], ["finetune"], ["gate", "--checkpoint", str(runs / "tiny/checkpoints/iter_01.json")]):
        assert main([cmd[0], "--config", cfg, *cmd[1:]]) == EXIT_OK, cmd
    run = runs / "tiny"
    for name in ("datasets/D_0.jsonl", "datasets/D_1.jsonl", "datasets/D_2.jsonl", "datasets/D_t.jsonl",
                 "checkpoints/iter_00.json", "checkpoints/iter_01.json", "reports/gate_00.json", "reports/gate_01.json",
                 "reports/metrics_00.csv", "reports/metrics_01.csv", "reports/buffer_01.csv", "manifest_collect.json"):
        assert (run / name).exists(), name
    manifest = json.loads((run / "manifest_train.json").read_text())
    for key in ("config_digest", "config", "seeds", "versions"):
        assert key in manifest
    assert set(manifest["versions"]) == {"python", "numpy", "scipy", "uarl"}


def test_seed_override_changes_manifest_deterministically(tmp_path, runs):
    cfg = _write(tmp_path, TINY)
    assert main(["collect", "--config", cfg, "--seed", "7"]) == EXIT_OK
    m7 = json.loads((runs / "tiny/manifest_collect.json").read_text())
    d7 = (runs / "tiny/datasets/D_0.jsonl").read_bytes()
    assert main(["collect", "--config", cfg, "--seed", "7"]) == EXIT_OK
    assert (runs / "tiny/datasets/D_0.jsonl").read_bytes() == d7
    assert json.loads((runs / "tiny/manifest_collect.json").read_text())["config_digest"] == m7["config_digest"]
    assert main(["collect", "--config", cfg]) == EXIT_OK
    m0 = json.loads((runs / "tiny/manifest_collect.json").read_text())
    assert m7["seeds"]["master"] == 7 and m0["seeds"]["master"] == 0
    assert m7["config_digest"] != m0["config_digest"]
    assert (runs / "tiny/datasets/D_0.jsonl").read_bytes() != d7


def test_curriculum_and_report(tmp_path, runs, capsys):
    assert main(["curriculum", "--config", _write(tmp_path, TINY)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "status:" in out
    run = runs / "tiny"
    audit = json.loads((run / "reports/audit.json").read_text())
    assert audit["violations"] == [] and audit["guarded_reads"] > 0
    res = build_report(run)
    with open(run / "reports/summary.csv") as fh:
        n_iter = len(list(csv.DictReader(fh)))
    assert res["summary_rows"] == n_iter
    with open(run / "report/summary.csv") as fh:
        assert len(list(csv.DictReader(fh))) == n_iter
    with open(run / "report/variance_traces.csv") as fh:
        traces = list(csv.DictReader(fh))
    assert {(r["source"], r["label"]) for r in traces} == {("id_calibration", "ID"), ("D_t", "OOD")}
    assert all(r["role"] == ("target_proxy" if r["label"] == "OOD" else "nominal") for r in traces)
    sheet = json.loads((run / "report/acceptance.json").read_text())
    assert [s["id"] for s in sheet] == list(ACCEPTANCE_IDS)
    assert sheet[9]["status"] == "pass"
    # report is a pure function of the run directory
    first = (run / "report/summary.csv").read_bytes(), (run / "report/variance_traces.csv").read_bytes()
    build_report(run)
    assert ((run / "report/summary.csv").read_bytes(), (run / "report/variance_traces.csv").read_bytes()) == first


def test_report_lists_missing_artifacts(tmp_path):
    (tmp_path / "reports").mkdir()
    with pytest.raises(FileNotFoundError) as info:
        build_report(tmp_path)
    assert "gate_XX.json" in str(info.value) and "metrics_XX.csv" in str(info.value)


def test_manifest_reconstructs_the_run(tmp_path, runs):
    cfg = _write(tmp_path, TINY)
    assert main(["collect", "--config", cfg]) == EXIT_OK
    manifest = json.loads((runs / "tiny/manifest_collect.json").read_text())
    first = (runs / "tiny/datasets/D_1.jsonl").read_bytes()
    rebuilt = _write(tmp_path, {**manifest["config"], "output": {"root": "runs", "name": "again"}}, "again.json")
    assert main(["collect", "--config", rebuilt]) == EXIT_OK
    assert (runs / "again/datasets/D_1.jsonl").read_bytes() == first
