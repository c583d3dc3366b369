"""Iterative range expansion, balanced fine-tuning and gating until deployment."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from uarl.agent import Policy, TrainConfig, evaluate_policy, finetune, save_checkpoint, train_offline, write_metrics
from uarl.buffer import merge_balanced
from uarl.data import Dataset, collect_rollouts, save_dataset, scripted_behavior_policy
from uarl.ensemble import CriticEnsemble
from uarl.envs import BudgetExhausted, DomainParams, EnvSpec, ParamRange, expand_range, range_from_schedule
from uarl.gate import GateConfig, GateReport, gate_decision, id_variances_from_rollouts

log = logging.getLogger(__name__)

STATUSES = ("running", "deployed", "budget_exhausted")
NOT_GENERALIZED = (
    "randomization schedule exhausted while critic variance on the target-proxy data is still above tau: "
    "the agent has not generalized to the target domain"
)


@dataclass
class DataConfig:
    nominal_episodes: int = 200
    repulsive_episodes: int = 200
    target_episodes: int = 40
    behavior_noise: float = 0.1
    eval_episodes: int = 10

    def __post_init__(self) -> None:
        for name in ("nominal_episodes", "repulsive_episodes", "target_episodes", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"DataConfig.{name} must be >= 1")
        if self.behavior_noise < 0:
            raise ValueError("DataConfig.behavior_noise must be >= 0")


def derive_seed(master: int, *tags: int) -> int:
    return int(np.random.SeedSequence([int(master), *map(int, tags)]).generate_state(1)[0])


@dataclass
class CurriculumState:
    iteration: int
    nominal_range: ParamRange
    repulsive_range: ParamRange
    datasets: dict[str, Dataset] = field(default_factory=dict)
    gate_history: list[GateReport] = field(default_factory=list)
    status: str = "running"
    summaries: list[dict] = field(default_factory=list)
    policy: Policy | None = None
    ensemble: CriticEnsemble | None = None
    message: str = ""
    buffer_history: list[list[str]] = field(default_factory=list)
    repulsive_history: list[str] = field(default_factory=list)

    @property
    def latest_gate(self) -> GateReport | None:
        return self.gate_history[-1] if self.gate_history else None

    def set_status(self, status: str, message: str = "") -> None:
        if status not in STATUSES:
            raise ValueError(f"unknown status {status!r}")
        if self.status != "running" and status != self.status:
            raise RuntimeError(f"illegal status transition {self.status} -> {status}")
        self.status = status
        self.message = message

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "status": self.status,
            "message": self.message,
            "nominal_range": self.nominal_range.to_dict(),
            "repulsive_range": self.repulsive_range.to_dict(),
            "datasets": sorted(self.datasets),
            "buffer_history": self.buffer_history,
            "repulsive_history": self.repulsive_history,
            "summaries": self.summaries,
        }


SUMMARY_FIELDS = ("iteration", "sigma2_mean", "tau", "decision", "target_return")


def iteration_summary(state: CurriculumState, spec: EnvSpec | None = None, phi_t: DomainParams | None = None,
                      eval_episodes: int = 10, seed: int = 0) -> dict:
    """Report row for the latest gate. The return at ``phi_t`` is for reporting only."""
    report = state.latest_gate
    if report is None:
        raise ValueError("no completed iteration to summarize")
    target_return = float("nan")
    if spec is not None and phi_t is not None and state.policy is not None:
        prange = ParamRange(state.nominal_range.active_param, phi_t.get(state.nominal_range.active_param),
                            phi_t.get(state.nominal_range.active_param), phi_t)
        target_return = evaluate_policy(state.policy, spec, prange, eval_episodes, seed)
    return {"iteration": report.iteration, "sigma2_mean": report.sigma2_mean, "tau": report.tau,
            "decision": report.decision, "target_return": target_return}


def write_summary(rows: list[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_FIELDS)
        for r in rows:
            w.writerow([r["iteration"], repr(float(r["sigma2_mean"])), repr(float(r["tau"])), r["decision"],
                        repr(float(r["target_return"]))])


def collect_target_proxy(spec: EnvSpec, phi_t: DomainParams, active_param: str, n_episodes: int, seed: int,
                         behavior_noise: float = 0.1) -> Dataset:
    """Guarded target-domain dataset rolled out by the behavior policy at ``phi_t``."""
    v = phi_t.get(active_param)
    prange = ParamRange(active_param, v, v, phi_t)
    behavior = scripted_behavior_policy(spec, behavior_noise, seed)
    return collect_rollouts(spec, prange, behavior, n_episodes, seed, role="target_proxy", name="D_t", guarded=True)


def run_curriculum(
    spec: EnvSpec,
    active_param: str,
    schedule: list,
    target_proxy: Dataset,
    gate_config: GateConfig,
    train_config: TrainConfig,
    data_config: DataConfig | None = None,
    max_iters: int | None = None,
    seed: int = 0,
    out_dir: str | Path | None = None,
    phi_t: DomainParams | None = None,
) -> CurriculumState:
    """Run the expand / collect / fine-tune / gate loop until deploy or budget exhaustion.

    ``phi_t`` is only used for the reporting-only return column.
    """
    data_config = data_config or DataConfig()
    if len(schedule) < 2:
        raise ValueError("schedule needs at least two stages (nominal and first repulsive range)")
    if target_proxy.role != "target_proxy":
        raise ValueError(f"target proxy must have role 'target_proxy', got {target_proxy.role!r}")
    if max_iters is None:
        max_iters = len(schedule)
    if max_iters < 0:
        raise ValueError("max_iters must be >= 0")
    out = Path(out_dir) if out_dir is not None else None
    nominal = spec.nominal_params
    behavior = scripted_behavior_policy(spec, data_config.behavior_noise, derive_seed(seed, 0))

    E = [range_from_schedule(active_param, schedule, 0, nominal)]
    E.append(expand_range(E[0], schedule, 0))
    D = [
        collect_rollouts(spec, E[0], behavior, data_config.nominal_episodes, derive_seed(seed, 1, 0), "nominal", name="D_0"),
        collect_rollouts(spec, E[1], behavior, data_config.repulsive_episodes, derive_seed(seed, 1, 1), "repulsive", name="D_1"),
    ]
    state = CurriculumState(0, E[0], E[1], {"D_0": D[0], "D_1": D[1]})
    state.repulsive_history.append("D_1")
    state.buffer_history.append(["D_0"])
    tc = TrainConfig.from_dict({**train_config.to_dict(), "seed": derive_seed(seed, 2, 0)})
    res = train_offline(D[0], D[1], tc)
    state.policy, state.ensemble = res.policy, res.ensemble
    _persist_phase(out, 0, res.metrics, state)

    def gate_now() -> GateReport:
        idv = id_variances_from_rollouts(state.ensemble, spec, E[state.iteration], behavior, gate_config.id_episodes,
                                         derive_seed(seed, 3, state.iteration))
        report = gate_decision(state.ensemble, target_proxy, gate_config, idv, state.iteration)
        state.gate_history.append(report)
        row = iteration_summary(state, spec, phi_t, data_config.eval_episodes, derive_seed(seed, 4))
        state.summaries.append(row)
        if out is not None:
            report.save(out / "reports", f"gate_{state.iteration:02d}")
        log.info("iteration %d: sigma2=%.4g tau=%.4g -> %s", state.iteration, report.sigma2_mean, report.tau, report.decision)
        return report

    report = gate_now()
    while not report.deploy:
        i = state.iteration
        if i >= max_iters:
            state.set_status("budget_exhausted", NOT_GENERALIZED)
            break
        try:
            E.append(expand_range(E[i + 1], schedule, i + 1))
        except BudgetExhausted as exc:
            state.set_status("budget_exhausted", f"{NOT_GENERALIZED} ({exc})")
            break
        explorer = state.policy.copy()
        explorer.noise_std = train_config.exploration_noise
        d_new = collect_rollouts(spec, E[i + 2], explorer, data_config.repulsive_episodes, derive_seed(seed, 1, i + 2),
                                 "repulsive", name=f"D_{i + 2}")
        D.append(d_new)
        state.datasets[d_new.name] = d_new
        pool = [D[0]] + [d.retag("nominal") for d in D[1 : i + 2]]
        buffer = merge_balanced(pool, state.ensemble)
        state.buffer_history.append([f"D_{k}" for k in range(i + 2)])
        state.repulsive_history.append(d_new.name)
        res = finetune(state.policy, state.ensemble, buffer, d_new, train_config, seed_offset=derive_seed(seed, 5, i))
        state.policy, state.ensemble = res.policy, res.ensemble
        state.iteration = i + 1
        state.nominal_range, state.repulsive_range = E[i + 1], E[i + 2]
        _persist_phase(out, state.iteration, res.metrics, state, buffer)
        report = gate_now()
    else:
        state.set_status("deployed", f"deploy policy of iteration {state.iteration}")

    if out is not None:
        for name, d in state.datasets.items():
            save_dataset(d, out / "datasets" / f"{name}.jsonl")
        save_dataset(target_proxy, out / "datasets" / "D_t.jsonl")
        write_summary(state.summaries, out / "reports" / "summary.csv")
        (out / "reports" / "state.json").write_text(json.dumps(state.to_dict(), indent=2))
    return state


def _persist_phase(out: Path | None, iteration: int, metrics: list[dict], state: CurriculumState, buffer=None) -> None:
    if out is None:
        return
    write_metrics(metrics, out / "reports" / f"metrics_{iteration:02d}.csv")
    save_checkpoint(out / "checkpoints" / f"iter_{iteration:02d}.json", state.policy, state.ensemble,
                    {"iteration": iteration})
    if buffer is not None:
        buffer.dump_csv(out / "reports" / f"buffer_{iteration:02d}.csv")


__all__ = [
    "CurriculumState",
    "DataConfig",
    "collect_target_proxy",
    "derive_seed",
    "iteration_summary",
    "run_curriculum",
    "write_summary",
]
