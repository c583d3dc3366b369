"""Command-line experiment runner: collect, train, finetune, gate, curriculum, oracle, report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from uarl.agent import finetune, load_checkpoint, save_checkpoint, train_offline, write_metrics
from uarl.buffer import merge_balanced
from uarl.config import ConfigError, ExperimentConfig, load_config
from uarl.curriculum import collect_target_proxy, derive_seed, run_curriculum, write_summary
from uarl.data import collect_rollouts, load_dataset, save_dataset, scripted_behavior_policy
from uarl.envs import expand_range, range_from_schedule
from uarl.firewall import AUDIT
from uarl.gate import gate_decision, id_variances_from_rollouts
from uarl import oracle

log = logging.getLogger("uarl")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_FAILED = 0, 1, 2, 3
ORACLE_CHECKS = ("critic_gap", "operator_perturbation", "value_error", "bias_reduction", "fitted_q")
ACCEPTANCE_IDS = tuple(range(1, 12))
ACCEPTANCE_TITLES = {
    1: "variance decomposition identity",
    2: "gradient correctness",
    3: "backbone reduction at lambda=0",
    4: "OOD separation",
    5: "gatekeeper trend",
    6: "gate end-to-end",
    7: "tabular certificates",
    8: "weighted fitted-Q",
    9: "balanced buffer statistics",
    10: "safety firewall",
    11: "Gaussian threshold formula",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uarl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(name: str, help_: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="experiment JSON")
        sp.add_argument("--seed", type=int, default=None, help="override the master seed")
        return sp

    with_config("collect", "collect D_0, D_1 and the guarded target proxy D_t")
    with_config("train", "offline training on the collected D_0 / D_1")
    sp = with_config("finetune", "one balanced fine-tuning round from a checkpoint")
    sp.add_argument("--checkpoint", default=None, help="defaults to <run>/checkpoints/iter_00.json")
    sp = with_config("gate", "gate decision for a checkpoint against D_t")
    sp.add_argument("--checkpoint", default=None)
    with_config("curriculum", "full expand / fine-tune / gate loop")
    sp = sub.add_parser("oracle", help="exact tabular certificates")
    sp.add_argument("--check", choices=ORACLE_CHECKS + ("all",), default="all")
    sp.add_argument("--trials", type=int, default=None, help="100 random pairs, 50 constructions by default")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None, help="certificate JSON path")
    sp = sub.add_parser("report", help="summary bundle of a run directory")
    sp.add_argument("run_dir")
    return p


# ---------------------------------------------------------------------------
# manifest


def versions() -> dict:
    from importlib.metadata import PackageNotFoundError, version

    try:
        pkg = version("artifact")
    except PackageNotFoundError:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__, "uarl": pkg}


def write_manifest(run_dir: Path, cfg: ExperimentConfig, command: str, argv: list[str]) -> dict:
    manifest = {
        "command": command,
        "argv": argv,
        "config_digest": cfg.digest(),
        "config": cfg.to_dict(),
        "seeds": {**cfg.seeds.to_dict(), "train": cfg.train.seed},
        "versions": versions(),
    }
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / f"manifest_{command}.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def _ranges(cfg: ExperimentConfig):
    env = cfg.env
    e0 = range_from_schedule(env.active_param, env.schedule, 0, env.spec.nominal_params)
    return e0, expand_range(e0, env.schedule, 0)


def _require_file(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing artifact: {path}")
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_collect(cfg: ExperimentConfig, run: Path) -> int:
    e0, e1 = _ranges(cfg)
    seed = cfg.seeds.master
    behavior = scripted_behavior_policy(cfg.env.spec, cfg.data.behavior_noise, derive_seed(seed, 0))
    d0 = collect_rollouts(cfg.env.spec, e0, behavior, cfg.data.nominal_episodes, derive_seed(seed, 1, 0), "nominal",
                          name="D_0")
    d1 = collect_rollouts(cfg.env.spec, e1, behavior, cfg.data.repulsive_episodes, derive_seed(seed, 1, 1), "repulsive",
                          name="D_1")
    dt = _target_proxy(cfg)
    for d in (d0, d1):
        save_dataset(d, run / "datasets" / f"{d.name}.jsonl")
    save_dataset(dt, run / "datasets" / "D_t.jsonl")
    print(f"collected D_0 ({len(d0)}), D_1 ({len(d1)}), D_t ({len(dt)}) into {run / 'datasets'}")
    return EXIT_OK


def _target_proxy(cfg: ExperimentConfig):
    return collect_target_proxy(cfg.env.spec, cfg.env.target_params, cfg.env.active_param, cfg.data.target_episodes,
                                cfg.seeds.target, cfg.data.behavior_noise)


def cmd_train(cfg: ExperimentConfig, run: Path) -> int:
    d0 = load_dataset(_require_file(run / "datasets" / "D_0.jsonl"))
    d1 = load_dataset(_require_file(run / "datasets" / "D_1.jsonl"))
    res = train_offline(d0, d1, cfg.train)
    write_metrics(res.metrics, run / "reports" / "metrics_00.csv")
    save_checkpoint(run / "checkpoints" / "iter_00.json", res.policy, res.ensemble, {"iteration": 0})
    print(f"trained {cfg.train.steps} steps; checkpoint {run / 'checkpoints' / 'iter_00.json'}")
    return EXIT_OK


def cmd_finetune(cfg: ExperimentConfig, run: Path, checkpoint: str | None) -> int:
    ckpt = Path(checkpoint) if checkpoint else run / "checkpoints" / "iter_00.json"
    policy, ens, extra = load_checkpoint(_require_file(ckpt))
    it = int(extra.get("iteration", 0))
    e0, e1 = _ranges(cfg)
    ranges = [e0, e1]
    for k in range(1, it + 2):
        ranges.append(expand_range(ranges[-1], cfg.env.schedule, k))
    pool = [load_dataset(_require_file(run / "datasets" / "D_0.jsonl"))]
    pool += [load_dataset(_require_file(run / "datasets" / f"D_{k}.jsonl")).retag("nominal") for k in range(1, it + 2)]
    explorer = policy.copy()
    explorer.noise_std = cfg.train.exploration_noise
    seed = cfg.seeds.master
    d_new = collect_rollouts(cfg.env.spec, ranges[it + 2], explorer, cfg.data.repulsive_episodes,
                             derive_seed(seed, 1, it + 2), "repulsive", name=f"D_{it + 2}")
    save_dataset(d_new, run / "datasets" / f"{d_new.name}.jsonl")
    buffer = merge_balanced(pool, ens)
    res = finetune(policy, ens, buffer, d_new, cfg.train, seed_offset=derive_seed(seed, 5, it))
    write_metrics(res.metrics, run / "reports" / f"metrics_{it + 1:02d}.csv")
    buffer.dump_csv(run / "reports" / f"buffer_{it + 1:02d}.csv")
    out = run / "checkpoints" / f"iter_{it + 1:02d}.json"
    save_checkpoint(out, res.policy, res.ensemble, {"iteration": it + 1})
    print(f"fine-tuned iteration {it + 1}; checkpoint {out}")
    return EXIT_OK


def cmd_gate(cfg: ExperimentConfig, run: Path, checkpoint: str | None) -> int:
    ckpt = Path(checkpoint) if checkpoint else run / "checkpoints" / "iter_00.json"
    policy, ens, extra = load_checkpoint(_require_file(ckpt))
    it = int(extra.get("iteration", 0))
    e0, e1 = _ranges(cfg)
    nominal = e0
    for k in range(1, it + 1):
        nominal = expand_range(nominal, cfg.env.schedule, k - 1)
    behavior = scripted_behavior_policy(cfg.env.spec, cfg.data.behavior_noise, derive_seed(cfg.seeds.master, 0))
    idv = id_variances_from_rollouts(ens, cfg.env.spec, nominal, behavior, cfg.gate.id_episodes,
                                     derive_seed(cfg.seeds.master, 3, it))
    dt_path = run / "datasets" / "D_t.jsonl"
    dt = load_dataset(dt_path) if dt_path.exists() else _target_proxy(cfg)
    report = gate_decision(ens, dt, cfg.gate, idv, it)
    report.save(run / "reports", f"gate_{it:02d}")
    print(f"iteration {it}: sigma2_mean={report.sigma2_mean:.6g} tau={report.tau:.6g} -> {report.decision}")
    return EXIT_OK


def cmd_curriculum(cfg: ExperimentConfig, run: Path) -> int:
    AUDIT.reset()
    dt = _target_proxy(cfg)
    state = run_curriculum(cfg.env.spec, cfg.env.active_param, cfg.env.schedule, dt, cfg.gate, cfg.train, cfg.data,
                           seed=cfg.seeds.master, out_dir=run, phi_t=cfg.env.target_params)
    audit = {"violations": [{"dataset": v.dataset, "scope": list(v.scope)} for v in AUDIT.violations],
             "guarded_reads": AUDIT.guarded_reads}
    (run / "reports" / "audit.json").write_text(json.dumps(audit, indent=2))
    for row in state.summaries:
        print(f"iteration {row['iteration']}: sigma2_mean={row['sigma2_mean']:.6g} tau={row['tau']:.6g} "
              f"-> {row['decision']} (return at phi_t {row['target_return']:.3f})")
    print(f"status: {state.status}. {state.message}")
    return EXIT_OK


def cmd_oracle(check: str, trials: int | None, seed: int, out: str | None) -> int:
    checks = ORACLE_CHECKS if check == "all" else (check,)
    certs: list[oracle.Certificate] = []
    failed: dict[str, int] = {}
    for name in checks:
        if name in oracle.SWEEP_CHECKS:
            batch = oracle.random_pair_sweep(name, trials or 100, seed)
        elif name == "bias_reduction":
            batch = oracle.bias_reduction_constructions(trials or 50, seed)
        else:
            batch = [_fitted_q_certificate()]
        certs.extend(batch)
        failed[name] = sum(c.holds is False for c in batch)
        skipped = sum(c.holds is None for c in batch)
        print(f"{name}: {len(batch)} checked, {failed[name]} counterexamples, {skipped} skipped")
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(oracle.certificate_json(certs))
    return EXIT_FAILED if any(failed.values()) else EXIT_OK


def _fitted_q_certificate() -> oracle.Certificate:
    sc = oracle.mixed_phi_scenario()
    _, weighted = oracle.weighted_fitted_q(sc.factory, sc.samples, 200, sc.weights, sc.phi_t)
    _, uniform = oracle.weighted_fitted_q(sc.factory, sc.samples, 200, oracle.uniform_weights, sc.phi_t)
    return oracle.Certificate("fitted_q", weighted, uniform, bool(weighted <= uniform + oracle.TOL),
                              {"scenario": "mixed_phi_scenario", "K": 200})


# ---------------------------------------------------------------------------
# report


def build_report(run_dir: str | Path) -> dict:
    """Summary CSV, labeled variance traces and the acceptance sheet. Reads only ``run_dir``."""
    run = Path(run_dir)
    reports = run / "reports"
    gates = sorted(reports.glob("gate_[0-9][0-9].json")) if reports.is_dir() else []
    missing = []
    if not gates:
        missing.append("reports/gate_XX.json")
    if not reports.is_dir() or not list(reports.glob("metrics_[0-9][0-9].csv")):
        missing.append("reports/metrics_XX.csv")
    if missing:
        raise FileNotFoundError("missing artifacts: " + ", ".join(missing))
    out = run / "report"
    out.mkdir(exist_ok=True)
    rows, trace_rows = [], []
    for g in gates:
        d = json.loads(g.read_text())
        it = int(d["iteration"])
        rows.append({"iteration": it, "sigma2_mean": d["sigma2_mean"], "tau": d["tau"], "decision": d["decision"],
                     "target_return": float("nan")})
        for e, v in enumerate(d["id_variances"]):
            trace_rows.append((it, "id_calibration", "nominal", "ID", e, v, d["tau"]))
        for e, v in enumerate(d["episode_sigma2"]):
            trace_rows.append((it, "D_t", "target_proxy", "OOD", e, v, d["tau"]))
    summary_src = reports / "summary.csv"
    if summary_src.exists():
        with summary_src.open() as fh:
            returns = {int(r["iteration"]): float(r["target_return"]) for r in csv.DictReader(fh)}
        for r in rows:
            r["target_return"] = returns.get(r["iteration"], float("nan"))
    write_summary(rows, out / "summary.csv")
    with (out / "variance_traces.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "source", "role", "label", "episode", "sigma2_mean", "tau"])
        for it, src, role, label, e, v, tau in trace_rows:
            w.writerow([it, src, role, label, e, repr(float(v)), repr(float(tau))])
    sheet = acceptance_sheet(run)
    (out / "acceptance.json").write_text(json.dumps(sheet, indent=2))
    return {"summary_rows": len(rows), "trace_rows": len(trace_rows), "acceptance": sheet}


def acceptance_sheet(run: Path) -> list[dict]:
    """One entry per acceptance criterion; results come from ``acceptance_results.json`` when present.

    The file is looked up in the run directory, then in ``<runs root>/acceptance`` where
    the acceptance suite writes it. Criterion 10 is also evaluated from the run's access audit.
    """
    recorded = {}
    for src in (run / "acceptance_results.json", run.parent / "acceptance" / "acceptance_results.json"):
        if src.exists():
            recorded = {int(k): v for k, v in json.loads(src.read_text()).items()}
            break
    audit_path = run / "reports" / "audit.json"
    if audit_path.exists():
        audit = json.loads(audit_path.read_text())
        n = len(audit["violations"])
        recorded.setdefault(10, {"status": "pass" if n == 0 else "fail", "detail": f"{n} violations in this run"})
    sheet = []
    for cid in ACCEPTANCE_IDS:
        r = recorded.get(cid, {"status": "not_evaluated", "detail": ""})
        sheet.append({"id": cid, "title": ACCEPTANCE_TITLES[cid], "status": r["status"], "detail": r.get("detail", "")})
    return sheet


def cmd_report(run_dir: str) -> int:
    res = build_report(run_dir)
    print(f"report: {res['summary_rows']} summary rows, {res['trace_rows']} trace rows")
    for item in res["acceptance"]:
        print(f"  [{item['status']}] {item['id']:2d} {item['title']}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"uarl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "oracle":
            return cmd_oracle(args.check, args.trials, args.seed, args.out)
        if args.command == "report":
            return cmd_report(args.run_dir)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        run = cfg.run_dir()
        write_manifest(run, cfg, args.command, argv)
        if args.command == "collect":
            return cmd_collect(cfg, run)
        if args.command == "train":
            return cmd_train(cfg, run)
        if args.command == "finetune":
            return cmd_finetune(cfg, run, args.checkpoint)
        if args.command == "gate":
            return cmd_gate(cfg, run, args.checkpoint)
        return cmd_curriculum(cfg, run)
    except ConfigError as exc:
        print(f"uarl: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level boundary maps every failure to an exit code
        log.debug("failure", exc_info=True)
        print(f"uarl: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
