"""Command-line entry point: ``cmaml {train,eval,sweep,ablate,schedule,selftest}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    build_distributions,
    dump,
    load_config,
    parse_int_list,
    train_config,
)
from .curriculum import build_schedule
from .maml import evaluate
from .plotting import write_chart
from .tasks import ArchiveFormatError, InsufficientDataError
from .trainer import (
    CheckpointError,
    eval_inner_config,
    load_checkpoint,
    meta_test,
    run_ablation,
    run_sweep,
    run_training,
)

log = logging.getLogger("curriculum_maml")

FLAG_KEYS = {
    "seed": "seed",
    "multiplier": "curriculum.multiplier",
    "shot": "curriculum.shot",
    "way": "train.way",
    "steps": "curriculum.steps",
    "query_policy": "curriculum.query_policy",
    "schedule": "curriculum.schedule",
}


class UsageError(Exception):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _resolve(args) -> dict:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "first_order", False):
        overrides["train.first_order"] = True
    return load_config(args.config, overrides)


def write_manifest(out: Path, command: str, conf: dict, started: str, **extra) -> Path:
    manifest = {
        "tool": "curriculum-maml",
        "version": __version__,
        "command": command,
        "seed": conf["seed"],
        "config": conf,
        "started": started,
        "finished": _now(),
        **extra,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=False) + "\n")
    (out / "config.resolved").write_text(dump(conf))
    return path


def cmd_train(args) -> int:
    started = _now()
    conf = _resolve(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = train_config(conf, out)
    dists = build_distributions(conf)
    result = run_training(cfg, dists)
    acc, ci = meta_test(result.best.params, cfg, dists[2])
    rows = result.metrics
    window = max(1, cfg.val_every)
    steps = [r["step"] for r in rows]
    train_acc = [float(np.mean([q["train_query_acc"] for q in rows[max(0, i - window + 1):i + 1]]))
                 for i in range(len(rows))]
    val = [(r["step"], r["val_acc"]) for r in rows if r["val_acc"] is not None]
    series = {"train query acc (moving avg)": (steps, train_acc)}
    if val:
        series["validation acc"] = tuple(zip(*val))
    write_chart(out / "curves.svg", series, title="Training and validation accuracy",
                xlabel="step", ylabel="accuracy", vlines=result.schedule.boundaries)
    write_manifest(out, "train", conf, started,
                   results={"best_step": result.best.step, "best_val_error": result.best.val_error,
                            "test_acc": acc, "test_ci": ci},
                   outputs=["metrics.csv", "best.ckpt", "curves.svg"])
    print(f"best checkpoint at step {result.best.step} (val error {result.best.val_error:.4f})")
    print(f"meta-test accuracy: {acc:.4f} ± {ci:.4f}")
    return 0


def cmd_eval(args) -> int:
    conf = _resolve(args)
    cfg = train_config(conf)
    episodes = args.episodes if args.episodes is not None else cfg.test_episodes
    if episodes < 2:
        raise UsageError(f"--episodes must be >= 2 for a confidence interval, got {episodes}")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ckpt = load_checkpoint(args.checkpoint, cfg.fingerprint())
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    dists = build_distributions(conf)
    schedule = build_schedule(cfg.curriculum)
    shot = cfg.curriculum.shot
    acc, ci = evaluate(ckpt.params, dists[2], cfg.way, shot, shot, episodes,
                       eval_inner_config(cfg, schedule), np.random.default_rng([cfg.seed, 2]))
    record = {"checkpoint": str(args.checkpoint), "step": ckpt.step, "way": cfg.way, "shot": shot,
              "episodes": episodes, "seed": cfg.seed, "accuracy": acc, "ci95": ci,
              "fingerprint_mismatch": ckpt.fingerprint_mismatch}
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("eval.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("a") as fh:
        fh.write(json.dumps(record) + "\n")
    print(f"accuracy: {acc:.4f} ± {ci:.4f} ({episodes} episodes)")
    return 0


def cmd_sweep(args) -> int:
    started = _now()
    conf = _resolve(args)
    multipliers = parse_int_list(args.multipliers, "--multipliers")
    if any(m < 1 for m in multipliers):
        raise ConfigError(f"--multipliers must all be >= 1, got {multipliers}")
    seeds = parse_int_list(args.seeds, "--seeds") if args.seeds else [conf["seed"]]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = train_config(conf, out / "runs")
    rows = run_sweep(cfg, multipliers, seeds, build_distributions(conf), out / "sweep.csv")
    series = {}
    for policy in ("static", "adaptive"):
        label = "L = shot (static)" if policy == "static" else "L = K (adaptive)"
        xs = sorted(set(multipliers))
        ys = [float(np.mean([r["test_acc"] for r in rows if r["policy"] == policy and r["multiplier"] == m]))
              for m in xs]
        series[label] = (xs, ys)
    write_chart(out / "sweep.svg", series, title="Meta-test accuracy vs multiplier",
                xlabel="multiplier M", ylabel="accuracy")
    write_manifest(out, "sweep", conf, started, multipliers=multipliers, seeds=seeds,
                   outputs=["sweep.csv", "sweep.svg"])
    for r in rows:
        print(f"M={r['multiplier']:<3d} {r['policy']:<8s} seed={r['seed']}: {r['test_acc']:.4f} ± {r['ci']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    started = _now()
    conf = _resolve(args)
    seeds = parse_int_list(args.seeds, "--seeds") if args.seeds else [conf["seed"]]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = train_config(conf, out / "runs")
    rows = run_ablation(cfg, build_distributions(conf), seeds, out / "ablation.csv")
    write_manifest(out, "ablate", conf, started, seeds=seeds, outputs=["ablation.csv"])
    for r in rows:
        if r["seed"] == "mean":
            print(f"{r['label']:<48s} {r['test_acc']:.4f} ({r['delta']:+.4f})")
    return 0


def cmd_schedule(args) -> int:
    conf = _resolve(args)
    sys.stdout.write(build_schedule(train_config(conf).curriculum).to_csv())
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all

    ok = True
    for name, passed, detail in run_all():
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--multiplier", type=int)
    common.add_argument("--shot", type=int)
    common.add_argument("--way", type=int)
    common.add_argument("--steps", type=int)
    common.add_argument("--query-policy", dest="query_policy", choices=["static", "adaptive"])
    common.add_argument("--schedule", choices=["curriculum", "static_support"])
    common.add_argument("--first-order", dest="first_order", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cmaml", description="Curriculum-scheduled MAML toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="meta-train one configuration")
    p.add_argument("--out", default="runs/train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="meta-test a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--episodes", type=int)
    p.add_argument("--out", help="JSON-lines file to append to (default: eval.jsonl next to checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="multiplier sweep, both query policies")
    p.add_argument("--multipliers", default="1,2,5,10")
    p.add_argument("--seeds")
    p.add_argument("--out", default="runs/sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", parents=[common], help="baseline, curriculum and static-support variants")
    p.add_argument("--seeds")
    p.add_argument("--out", default="runs/ablate")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("schedule", parents=[common], help="print the stage table as CSV")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("selftest", parents=[common], help="run gradient and schedule oracles")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, UsageError, InsufficientDataError, ArchiveFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
