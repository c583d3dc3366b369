"""Experiment configuration: JSON schema validation with field-path errors."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from uarl.agent import TrainConfig
from uarl.curriculum import DataConfig
from uarl.envs import DomainParams, EnvSpec
from uarl.envs.params import PARAM_NAMES
from uarl.gate import GateConfig

RUNS_ENV_VAR = "UARL_RUNS_DIR"
SECTIONS = ("env", "train", "gate", "data", "seeds", "output")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class EnvSection:
    spec: EnvSpec
    active_param: str
    schedule: list
    phi_t: float

    @property
    def target_params(self) -> DomainParams:
        return self.spec.nominal_params.with_value(self.active_param, self.phi_t)

    def to_dict(self) -> dict:
        return {**self.spec.to_dict(), "active_param": self.active_param, "schedule": self.schedule,
                "phi_t": self.phi_t}


@dataclass(frozen=True)
class Seeds:
    master: int = 0
    target: int = 999

    def to_dict(self) -> dict:
        return {"master": self.master, "target": self.target}


@dataclass
class ExperimentConfig:
    env: EnvSection
    train: TrainConfig
    gate: GateConfig
    data: DataConfig
    seeds: Seeds
    output_root: str = "runs"
    output_name: str = "run"
    raw: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "env": self.env.to_dict(),
            "train": self.train.to_dict(),
            "gate": self.gate.to_dict(),
            "data": {f.name: getattr(self.data, f.name) for f in fields(self.data)},
            "seeds": self.seeds.to_dict(),
            "output": {"root": self.output_root, "name": self.output_name},
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_seed(self, seed: int) -> ExperimentConfig:
        return ExperimentConfig(self.env, TrainConfig.from_dict({**self.train.to_dict(), "seed": int(seed)}),
                                self.gate, self.data, Seeds(int(seed), self.seeds.target), self.output_root,
                                self.output_name, self.raw)

    def run_dir(self) -> Path:
        root = os.environ.get(RUNS_ENV_VAR) or self.output_root
        return Path(root) / self.output_name


def _require(d: dict, key: str, path: str, kind) -> object:
    if key not in d:
        raise ConfigError(f"{path}.{key}", "missing required field")
    return _typed(d[key], f"{path}.{key}", kind)


def _typed(value, path: str, kind):
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, bool) or not isinstance(value, kind):
        names = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise ConfigError(path, f"expected {names}, got {type(value).__name__}")
    return value


def _section(raw: dict, name: str) -> dict:
    d = raw.get(name, {})
    if not isinstance(d, dict):
        raise ConfigError(name, f"expected object, got {type(d).__name__}")
    return d


def _build(cls, d: dict, path: str):
    known = {f.name: f for f in fields(cls)}
    for k, v in d.items():
        if k not in known:
            raise ConfigError(f"{path}.{k}", "unknown field")
        default = known[k].default
        if isinstance(default, tuple):
            for i, x in enumerate(_typed(v, f"{path}.{k}", list)):
                _typed(x, f"{path}.{k}[{i}]", int)
        elif k == "lambda_max" and v is None:
            pass
        elif isinstance(default, (bool, int, float, str)) or default is None:
            kind = float if default is None else type(default)
            _typed(v, f"{path}.{k}", kind)
    try:
        return cls.from_dict(d) if hasattr(cls, "from_dict") else cls(**d)
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        for k in d:
            if f".{k} " in msg or f".{k}" in msg.split(" ")[0]:
                raise ConfigError(f"{path}.{k}", msg) from exc
        raise ConfigError(path, msg) from exc


def _parse_env(d: dict) -> EnvSection:
    allowed = {"family", "horizon", "nominal_params", "active_param", "schedule", "phi_t"}
    for k in d:
        if k not in allowed:
            raise ConfigError(f"env.{k}", "unknown field")
    family = _require(d, "family", "env", str)
    horizon = _typed(d.get("horizon", 200), "env.horizon", int)
    nominal_raw = _typed(d.get("nominal_params", {}), "env.nominal_params", dict)
    for k, v in nominal_raw.items():
        if k not in PARAM_NAMES:
            raise ConfigError(f"env.nominal_params.{k}", "unknown domain parameter")
        _typed(v, f"env.nominal_params.{k}", float)
    try:
        nominal = DomainParams.from_dict(nominal_raw)
    except ValueError as exc:
        raise ConfigError("env.nominal_params", str(exc)) from exc
    try:
        spec = EnvSpec(family, horizon, nominal)
    except ValueError as exc:
        key = "family" if "family" in str(exc) else "horizon"
        raise ConfigError(f"env.{key}", str(exc)) from exc
    active = _require(d, "active_param", "env", str)
    if active not in PARAM_NAMES:
        raise ConfigError("env.active_param", f"must be one of {PARAM_NAMES}")
    schedule = _require(d, "schedule", "env", list)
    if len(schedule) < 2:
        raise ConfigError("env.schedule", "needs at least two stages")
    for i, entry in enumerate(schedule):
        p = f"env.schedule[{i}]"
        if isinstance(entry, list):
            if len(entry) != 2:
                raise ConfigError(p, "interval entries must be [lo, hi]")
            lo, hi = (_typed(x, p, float) for x in entry)
            if lo > hi:
                raise ConfigError(p, "lo must be <= hi")
        else:
            _typed(entry, p, float)
    phi_t = _require(d, "phi_t", "env", float)
    return EnvSection(spec, active, schedule, phi_t)


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a raw JSON object into an :class:`ExperimentConfig` before any work starts."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    for k in raw:
        if k not in SECTIONS:
            raise ConfigError(k, "unknown section")
    if "env" not in raw:
        raise ConfigError("env", "missing required section")
    env = _parse_env(_section(raw, "env"))
    train = _build(TrainConfig, _section(raw, "train"), "train")
    gate = _build(GateConfig, _section(raw, "gate"), "gate")
    data = _build(DataConfig, _section(raw, "data"), "data")
    seeds_raw = _section(raw, "seeds")
    for k in seeds_raw:
        if k not in ("master", "target"):
            raise ConfigError(f"seeds.{k}", "unknown field")
    seeds = Seeds(*(_typed(seeds_raw.get(k, dflt), f"seeds.{k}", int) for k, dflt in (("master", 0), ("target", 999))))
    out = _section(raw, "output")
    for k in out:
        if k not in ("root", "name"):
            raise ConfigError(f"output.{k}", "unknown field")
    root = _typed(out.get("root", "runs"), "output.root", str)
    name = _typed(out.get("name", "run"), "output.name", str)
    return ExperimentConfig(env, train, gate, data, seeds, root, name, raw)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("<root>", f"cannot read config {path}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
    return parse_config(raw)
