"""``sched-forge`` command line: parse, simulate, train, evaluate, compare.

Exit codes: 0 success, 1 domain error (bad trace, failed training, protocol
mismatch), 2 configuration or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

from . import config as cfgmod
from .baselines import RULE_NAMES, PriorityRule, rule_scheduler
from .config import ExperimentConfig, dump_config
from .ddppo import TrainResult, TuneSpec, curve_score, train, train_pbt, tune
from .errors import ConfigError, InvariantViolation, ProtocolMismatchError, SchedForgeError
from .metrics import GOALS, METRICS, episode_metrics, summarize, write_summary_csv
from .neural import load_checkpoint, policy_scheduler, save_checkpoint
from .simulator import Scheduler, run_episode
from .workload import (
    JobSequence,
    WorkloadTrace,
    load_trace,
    sample_sequences,
    sequences_digest,
    slice_sequence,
    trace_statistics,
)

logger = logging.getLogger("sched_forge")

ABLATION_VARIANTS = {
    "full": {"pbt": True, "tune": True},
    "no_pbt": {"pbt": False, "tune": True},
    "no_tune": {"pbt": True, "tune": False},
}
CURVE_FIELDS = ("iteration", "episode_reward_mean", "episodes", "transitions",
                "policy_loss", "value_loss", "entropy", "clip_fraction")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# configuration


def _resolve_config(args) -> ExperimentConfig:
    cfg = cfgmod.load_config(getattr(args, "config", None))
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "goal", None) is not None:
        over["goal"] = args.goal
    if getattr(args, "workers", None) is not None:
        over["sync.num_workers"] = args.workers
    if getattr(args, "pbt", None) is not None:
        over["pbt.enabled"] = args.pbt
    if getattr(args, "tune", None) is not None:
        over["tune.enabled"] = args.tune
    section = {"train": "train", "evaluate": "evaluate", "simulate": "evaluate"}.get(args.command)
    if getattr(args, "iterations", None) is not None and section:
        over[f"{section}.iterations"] = args.iterations
    if getattr(args, "sequence_length", None) is not None:
        key = "env.sequence_length" if args.command == "train" else "evaluate.sequence_length"
        over[key] = args.sequence_length
    if getattr(args, "fixed_sequence", None) is not None:
        over["evaluate.fixed_sequence"] = args.fixed_sequence
    if getattr(args, "dataset", None):
        over["dataset.path"] = args.dataset
    return cfg.override(**over) if over else cfg


# ---------------------------------------------------------------------------
# schedulers


@dataclass
class SchedulerSpec:
    label: str
    source: str
    make: Callable[[], Scheduler]


def _checkpoint_path(spec: str) -> Path | None:
    p = Path(spec)
    if p.is_dir() and (p / "final.npz").exists():
        return p / "final.npz"
    if p.suffix == ".npz":
        return p
    return None


def resolve_schedulers(names, cfg: ExperimentConfig, trace: WorkloadTrace) -> list[SchedulerSpec]:
    """Turn rule names and checkpoint paths into scheduler factories; fails before any run."""
    feats = cfgmod.feature_config(cfg, trace)
    specs, labels = [], set()
    for name in names:
        ckpt = _checkpoint_path(name)
        if ckpt is not None:
            if not ckpt.exists():
                raise ConfigError(f"checkpoint {ckpt} does not exist")
            agent, _ = load_checkpoint(ckpt, window=cfg.cluster.window)
            label = ckpt.parent.name if ckpt.name == "final.npz" else ckpt.stem
            make = (lambda a: lambda: policy_scheduler(a, feats))(agent)
            source = str(ckpt)
        else:
            rule = PriorityRule.parse(name)
            label = rule.value
            make = (lambda r: lambda: rule_scheduler(r, cfg.seed))(rule)
            source = "rule"
        base, k = label, 2
        while label in labels:
            label = f"{base}-{k}"
            k += 1
        labels.add(label)
        specs.append(SchedulerSpec(label, source, make))
    if not specs:
        raise ConfigError("no schedulers given")
    return specs


def evaluation_sequences(cfg: ExperimentConfig, trace: WorkloadTrace) -> list[JobSequence]:
    ev = cfg.evaluate
    count = min(ev.sequence_length, len(trace.jobs))
    if ev.fixed_sequence:
        seq = sample_sequences(trace, 1, count, cfg.seed)[0]
        return [seq] * ev.iterations
    return sample_sequences(trace, ev.iterations, count, cfg.seed)


# ---------------------------------------------------------------------------
# commands


def cmd_parse(args) -> int:
    trace = load_trace(args.path, strict=args.strict)
    stats = trace_statistics(trace)
    report = {
        "path": str(args.path),
        "strict": args.strict,
        "valid_jobs": len(trace.jobs),
        "skipped_lines": trace.skipped_lines,
        "rejected_jobs": trace.rejected_jobs,
        "header": {k: v for k, v in trace.header.items() if isinstance(v, (int, float, str))},
        "stats": json.loads(stats.to_json()),
    }
    if args.out:
        out = Path(args.out)
        _write(out / "stats.json", stats.to_json() + "\n")
        _write(out / "stats.csv", stats.to_csv())
        _write(out / "report.json", _dump_json(report))
    if args.json:
        print(_dump_json(report), end="")
    else:
        print(f"{args.path}: {len(trace.jobs)} jobs, {stats.node_count} nodes, "
              f"{trace.skipped_lines} lines skipped, {trace.rejected_jobs} jobs rejected")
    return 0


def cmd_simulate(args) -> int:
    cfg = _resolve_config(args)
    trace = cfgmod.load_dataset(cfg)
    _, held = cfgmod.split_dataset(cfg, trace)
    spec = resolve_schedulers([args.scheduler or "fcfs"], cfg, trace)[0]
    count = min(cfg.evaluate.sequence_length, len(held.jobs))
    start = args.start if args.start is not None else 0
    seq = slice_sequence(held, start, min(count, len(held.jobs) - start))
    result = run_episode(seq, spec.make(), cfgmod.episode_config(cfg, trace))
    metrics = episode_metrics(result)
    out = Path(args.out)
    _write(out / "jobs.csv", result.to_csv())
    _write(out / "metrics.json", _dump_json({
        "scheduler": spec.label, "sequence_hash": seq.digest(), "metrics": metrics,
        "decisions": result.decisions, "dropped": result.dropped,
        "config": cfg.to_dict(),
    }))
    print(" ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    return 0


def _curve_csv(curve: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CURVE_FIELDS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for rec in curve:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.items()})
    return buf.getvalue()


def _train_variant(cfg: ExperimentConfig, trace: WorkloadTrace, out: Path, use_pbt: bool,
                   use_tune: bool) -> dict:
    train_part, _ = cfgmod.split_dataset(cfg, trace)
    tc = cfgmod.train_config(cfg, trace)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.yaml", dump_config(cfg))
    log_file = open(out / "train_log.jsonl", "w")

    def log(rec: dict) -> None:
        log_file.write(json.dumps(rec, sort_keys=True) + "\n")
        log_file.flush()

    tuned = None
    try:
        if use_tune:
            spec = TuneSpec(space=dict(cfg.tune.space), trials=cfg.tune.trials, seed=cfg.seed,
                            max_concurrent=cfg.tune.max_concurrent)
            trial_iters = min(cfg.tune.iterations, tc.iterations)

            def trial(hp: dict, seed: int) -> TrainResult:
                return train(train_part, replace(tc, ppo=replace(tc.ppo, **hp), iterations=trial_iters,
                                                 seed=seed, checkpoint_every=0))

            tuned = tune(spec, trial, out / "tune_trials.json")
            tc = replace(tc, ppo=replace(tc.ppo, **tuned.hyperparams))
        if use_pbt:
            result = train_pbt(train_part, tc, cfgmod.pbt_config(cfg), log=log)
        else:
            result = train(train_part, tc, out_dir=out, log=log)
    finally:
        log_file.close()
    final = save_checkpoint(out / "final.npz", result.agent, {
        "goal": cfg.goal, "seed": cfg.seed, "iterations": tc.iterations,
        "features": {"pbt": use_pbt, "tune": use_tune},
    })
    _write(out / "train_curve.csv", _curve_csv(result.curve))
    manifest = {
        "features": {"pbt": use_pbt, "tune": use_tune},
        "iterations": tc.iterations,
        "workers": tc.sync.num_workers,
        "goal": cfg.goal,
        "seed": cfg.seed,
        "dataset": cfg.dataset.name,
        "final_checkpoint": final.name,
        "final_score": curve_score(result.curve) if result.curve else None,
        "hyperparameters": result.hyperparams,
        "tuned_hyperparameters": tuned.hyperparams if tuned else None,
        "config": cfg.to_dict(),
    }
    _write(out / "manifest.json", _dump_json(manifest))
    return manifest


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    trace = cfgmod.load_dataset(cfg)
    out = Path(args.out)
    if args.ablation:
        for name, flags in ABLATION_VARIANTS.items():
            m = _train_variant(cfg, trace, out / name, flags["pbt"], flags["tune"])
            print(f"{name}: score={m['final_score']}")
        return 0
    m = _train_variant(cfg, trace, out, cfg.pbt.enabled, cfg.tune.enabled)
    print(f"trained {m['iterations']} iterations, score={m['final_score']}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    names = args.scheduler or list(cfg.evaluate.schedulers)
    cfg = cfg.override(**{"evaluate.schedulers": list(names)})
    trace = cfgmod.load_dataset(cfg)
    specs = resolve_schedulers(names, cfg, trace)
    _, held = cfgmod.split_dataset(cfg, trace)
    seqs = evaluation_sequences(cfg, held)
    ep = cfgmod.episode_config(cfg, trace)

    hashes = [s.digest() for s in seqs]
    summaries, raw_rows, seen = {}, [], {}
    for spec in specs:
        sched = spec.make()
        results = []
        seen[spec.label] = []
        for i, seq in enumerate(seqs):
            seen[spec.label].append(seq.digest())
            results.append(run_episode(seq, sched, ep))
        summaries[spec.label] = summarize(results)
        for i, m in enumerate(summaries[spec.label].per_episode[METRICS[0]]):
            raw_rows.append({
                "dataset": cfg.dataset.name, "scheduler": spec.label, "goal": cfg.goal,
                "iteration": i, "sequence_hash": hashes[i],
                **{k: summaries[spec.label].per_episode[k][i] for k in METRICS},
            })
    if any(v != hashes for v in seen.values()):
        raise InvariantViolation("schedulers were not evaluated on identical sequences")

    protocol = {
        "dataset": cfg.dataset.name,
        "goal": cfg.goal,
        "iterations": cfg.evaluate.iterations,
        "sequence_length": len(seqs[0]),
        "fixed_sequence": cfg.evaluate.fixed_sequence,
        "seed": cfg.seed,
        "sequences_digest": sequences_digest(seqs),
    }
    doc = {
        "protocol": protocol,
        "sequence_hashes": hashes,
        "schedulers": {s.label: {"source": s.source, "sequence_hashes": seen[s.label],
                                 **summaries[s.label].to_dict()} for s in specs},
        "config": cfg.to_dict(),
    }
    rows = []
    for s in specs:
        rows += summaries[s.label].csv_rows(dataset=cfg.dataset.name, scheduler=s.label, goal=cfg.goal)
    out = Path(args.out)
    _write(out / "summary.json", _dump_json(doc))
    _write(out / "summary.csv", write_summary_csv(rows))
    _write(out / "raw.csv", write_summary_csv(raw_rows))
    metric, _ = GOALS[cfg.goal]
    for s in specs:
        d = summaries[s.label].distributions[metric]
        print(f"{s.label:>12s}  {metric}={d.mean:.4f} ± {d.std:.4f}")
    return 0


def _load_result_set(path: Path) -> dict:
    f = path / "summary.json" if path.is_dir() else path
    try:
        return json.loads(f.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read result set {f}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{f} is not a result summary: {exc}") from None


def compare_results(docs: list[dict], names: list[str]) -> dict:
    """Merge result sets evaluated under one protocol; deltas are against the first set."""
    if len(docs) < 2:
        raise ConfigError("compare needs at least two result sets")
    ref = docs[0]["protocol"]
    for name, d in zip(names[1:], docs[1:]):
        diff = sorted(k for k in ref if d["protocol"].get(k) != ref[k])
        if diff:
            raise ProtocolMismatchError(f"{name} differs from {names[0]} in {diff}")
    rows = []
    for name, d in zip(names, docs):
        for label, s in d["schedulers"].items():
            row = {"result_set": name, "scheduler": label}
            for m in METRICS:
                row[m] = s[m]
                row[f"{m}_std"] = s["distributions"][m]["std"]
                base = docs[0]["schedulers"].get(label)
                row[f"{m}_delta"] = s[m] - base[m] if base is not None else None
            rows.append(row)
    best = {}
    for m in METRICS:
        lower = m != "utilization"
        vals = [r[m] for r in rows]
        target = min(vals) if lower else max(vals)
        best[m] = [f"{r['result_set']}/{r['scheduler']}" for r in rows if r[m] == target]
    return {"protocol": ref, "goal": ref["goal"], "rows": rows, "best": best}


def _markdown(report: dict) -> str:
    head = ["result set", "scheduler"] + list(METRICS)
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in report["rows"]:
        key = f"{r['result_set']}/{r['scheduler']}"
        cells = []
        for m in METRICS:
            mark = " **best**" if key in report["best"][m] else ""
            delta = r[f"{m}_delta"]
            d = f" ({delta:+.4f})" if delta is not None else ""
            cells.append(f"{r[m]:.4f} ± {r[f'{m}_std']:.4f}{d}{mark}")
        lines.append("| " + " | ".join([r["result_set"], r["scheduler"]] + cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    paths = [Path(p) for p in args.results]
    names = [p.name if p.is_dir() else p.parent.name for p in paths]
    names = [n if names.count(n) == 1 else f"{n}#{i}" for i, n in enumerate(names)]
    report = compare_results([_load_result_set(p) for p in paths], names)
    table = _markdown(report)
    if args.out:
        out = Path(args.out)
        _write(out / "compare.json", _dump_json(report))
        _write(out / "compare.csv", write_summary_csv(report["rows"]))
        _write(out / "compare.md", table)
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser, *, goal=True, out_required=True) -> None:
    p.add_argument("--config", help="YAML experiment config; omitted keys take the defaults below")
    p.add_argument("--seed", type=int, help="experiment seed (default: config value, 0)")
    if goal:
        p.add_argument("--goal", choices=sorted(GOALS), help="optimization goal (default: bsld)")
    p.add_argument("--dataset", help="SWF trace path; overrides dataset.path")
    p.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    epilog = "default configuration:\n\n" + dump_config(ExperimentConfig())
    parser = argparse.ArgumentParser(
        prog="sched-forge",
        description="Batch-job scheduling simulator with rule-based and DD-PPO schedulers.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=epilog,
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("parse", help="validate an SWF trace and report statistics", formatter_class=fmt)
    p.add_argument("path")
    p.add_argument("--strict", action="store_true", help="fail on the first malformed line")
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    p.add_argument("--out", help="directory for stats.json / stats.csv / report.json")

    p = sub.add_parser("simulate", help="replay one held-out sequence with one scheduler", formatter_class=fmt)
    _common(p)
    p.add_argument("--scheduler", help=f"rule ({', '.join(RULE_NAMES)}) or checkpoint path; default fcfs")
    p.add_argument("--sequence-length", type=int)
    p.add_argument("--start", type=int, help="index of the first job in the held-out trace")

    p = sub.add_parser("train", help="train a DD-PPO scheduler", formatter_class=fmt)
    _common(p)
    p.add_argument("--iterations", type=int, help="training iterations (default 200)")
    p.add_argument("--sequence-length", type=int, help="jobs per training episode (default 128)")
    p.add_argument("--workers", type=int, help="DD-PPO workers (default 4)")
    p.add_argument("--pbt", action=argparse.BooleanOptionalAction, help="population-based training")
    p.add_argument("--tune", action=argparse.BooleanOptionalAction, help="random-search tuning first")
    p.add_argument("--ablation", action="store_true",
                   help="train the full / no_pbt / no_tune variants into subdirectories of --out")

    p = sub.add_parser("evaluate", help="compare schedulers on identical held-out sequences",
                       formatter_class=fmt)
    _common(p)
    p.add_argument("--scheduler", action="append",
                   help="rule name, checkpoint file or training directory; repeatable")
    p.add_argument("--iterations", type=int, help="evaluation sequences (default 10)")
    p.add_argument("--sequence-length", type=int, help="jobs per sequence (default 1024)")
    p.add_argument("--fixed-sequence", action=argparse.BooleanOptionalAction,
                   help="replay one sequence every iteration")

    p = sub.add_parser("compare", help="merge evaluation result directories", formatter_class=fmt)
    p.add_argument("results", nargs="+", help="evaluate output directories (or summary.json files)")
    p.add_argument("--out", help="directory for compare.json / compare.csv / compare.md")
    return parser


COMMANDS = {
    "parse": cmd_parse,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    except SchedForgeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
