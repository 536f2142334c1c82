"""Curriculum MAML training loop, checkpoints and experiment drivers."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import struct
import time
import warnings
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .curriculum import CurriculumConfig, Schedule, build_schedule
from .maml import SGD, Adam, InnerConfig, evaluate, evaluate_regression, meta_step
from .model import FfnSpec, ParameterSet, init_params
from .tasks import InsufficientDataError, Sinusoids, TaskDistribution

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "stage", "K", "L", "alpha", "train_loss", "train_query_acc", "val_acc", "wall_ms"]
CKPT_MAGIC = b"CMLC"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    way: int = 5
    hidden: tuple[int, ...] = (64, 64)
    outer_lr: float = 0.1
    meta_batch_size: int = 4
    inner_steps: int = 1
    first_order: bool = False
    optimizer: str = "sgd"
    val_every: int = 250
    val_episodes: int = 200
    test_episodes: int = 600
    seed: int = 0
    output_dir: Optional[str] = None

    def validate(self) -> None:
        self.curriculum.validate()
        if self.val_every < 1:
            raise ValueError(f"val_every must be >= 1, got {self.val_every}")
        if self.val_episodes < 2:
            raise ValueError(f"val_episodes must be >= 2, got {self.val_episodes}")
        if self.meta_batch_size < 1:
            raise ValueError(f"meta_batch_size must be >= 1, got {self.meta_batch_size}")
        if self.way < 2:
            raise ValueError(f"way must be >= 2, got {self.way}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not self.outer_lr >= 0:
            raise ValueError(f"outer_lr must be non-negative, got {self.outer_lr}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def fingerprint(self) -> int:
        """CRC32 of the config, ignoring where outputs go."""
        d = self.to_dict()
        d.pop("output_dir")
        return zlib.crc32(json.dumps(d, sort_keys=True).encode("utf-8"))


@dataclass
class Checkpoint:
    params: ParameterSet
    step: int
    val_error: float
    fingerprint: int
    fingerprint_mismatch: bool = False


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# checkpoint files


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<IQdI", CKPT_VERSION, ckpt.step, ckpt.val_error, ckpt.fingerprint)]
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(ckpt))
    return path


def load_checkpoint(path, expected_fingerprint: Optional[int] = None) -> Checkpoint:
    """Read a checkpoint; a fingerprint mismatch warns and sets ``fingerprint_mismatch``."""
    data = Path(path).read_bytes()
    head = 4 + struct.calcsize("<IQdI")
    if len(data) < head:
        raise CheckpointError(f"truncated checkpoint: expected at least {head} bytes, found {len(data)}")
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r}")
    version, step, val_error, fingerprint = struct.unpack_from("<IQdI", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos, entries = head, []

    def need(n, what):
        if pos + n > len(data):
            raise CheckpointError(
                f"truncated checkpoint reading {what}: expected {n} bytes, found {len(data) - pos}"
            )

    while pos < len(data):
        need(2, "name length")
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        need(name_len + 1, "name")
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        rank = data[pos]
        pos += 1
        need(4 * rank, f"{name} dims")
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims, dtype=np.int64))
        need(8 * count, f"{name} data")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims)
        pos += 8 * count
        entries.append((name, arr))
    if not entries:
        raise CheckpointError("checkpoint holds no parameters")

    mismatch = expected_fingerprint is not None and expected_fingerprint != fingerprint
    if mismatch:
        warnings.warn(
            f"checkpoint fingerprint {fingerprint:#010x} differs from config {expected_fingerprint:#010x}",
            stacklevel=2,
        )
    return Checkpoint(ParameterSet(entries), step, val_error, fingerprint, mismatch)


# --------------------------------------------------------------------------
# training


def preflight(cfg: TrainConfig, schedule: Schedule, dists: Sequence[TaskDistribution]) -> None:
    """Fail before step 0 if any split cannot serve its worst-case episode."""
    train, val, test = dists
    shot = cfg.curriculum.shot
    demands = [(train, schedule.max_demand()), (val, 2 * shot), (test, 2 * shot)]
    for dist, per_class in demands:
        check = getattr(dist, "check_supply", None)
        if check is not None:
            check(cfg.way, per_class)
        elif dist.max_examples_per_class() < per_class:
            raise InsufficientDataError(
                f"{dist.split} split supplies {dist.max_examples_per_class()} < {per_class} examples per class"
            )


def eval_inner_config(cfg: TrainConfig, schedule: Schedule) -> InnerConfig:
    # validation and meta-test adapt with k = shot, so use the final-stage rate
    return InnerConfig(schedule.final.inner_lr, cfg.inner_steps, cfg.first_order)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_metrics(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in METRICS_HEADER])
    return path


def read_metrics(path) -> list[dict]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                if k in ("step", "stage", "K", "L"):
                    parsed[k] = int(v)
                else:
                    parsed[k] = float(v) if v != "" else None
            out.append(parsed)
    return out


@dataclass
class TrainResult:
    best: Checkpoint
    final_params: ParameterSet
    metrics: list[dict]
    metrics_path: Optional[Path]
    schedule: Schedule


def run_training(cfg: TrainConfig, dists: Sequence[TaskDistribution]) -> TrainResult:
    """Meta-train for exactly ``total_steps`` steps under the configured schedule.

    Validation runs after every ``val_every``-th step on a fixed set of
    ``shot``-shot episodes; the checkpoint with the lowest validation error
    wins, later steps winning ties. If no validation point falls inside the
    run, the final parameters are validated once at the end.
    """
    cfg.validate()
    train_dist, val_dist, _ = dists
    if train_dist.regression:
        raise ValueError("run_training drives classification tasks; use sinusoid_benchmark for regression")
    schedule = build_schedule(cfg.curriculum)
    preflight(cfg, schedule, dists)

    cur = cfg.curriculum
    spec = FfnSpec(train_dist.input_dim, cfg.hidden, cfg.way)
    theta = init_params(spec, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(cfg.outer_lr) if cfg.optimizer == "adam" else SGD(cfg.outer_lr)
    val_inner = eval_inner_config(cfg, schedule)
    fingerprint = cfg.fingerprint()

    def validate(params):
        val_rng = np.random.default_rng([cfg.seed, 1])
        acc, _ = evaluate(params, val_dist, cfg.way, cur.shot, cur.shot, cfg.val_episodes, val_inner, val_rng)
        return acc

    best: Optional[Checkpoint] = None
    rows = []
    for step in range(cur.total_steps):
        t0 = time.perf_counter()
        state = schedule.state_at(step)
        episodes = [
            train_dist.sample_episode(cfg.way, state.support_size, state.query_size, rng)
            for _ in range(cfg.meta_batch_size)
        ]
        inner = InnerConfig(state.inner_lr, cfg.inner_steps, cfg.first_order)
        theta, result = meta_step(theta, episodes, inner, cfg.outer_lr, optimizer)

        val_acc = None
        if (step + 1) % cfg.val_every == 0:
            val_acc = validate(theta)
            err = 1.0 - val_acc
            if best is None or err <= best.val_error:
                best = Checkpoint(theta, step + 1, err, fingerprint)
        rows.append({
            "step": step,
            "stage": state.index,
            "K": state.support_size,
            "L": state.query_size,
            "alpha": state.inner_lr,
            "train_loss": result.meta_loss,
            "train_query_acc": float(np.mean(result.query_accuracies)),
            "val_acc": val_acc,
            "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
        })
        if val_acc is not None:
            log.info("step %d stage %d K=%d L=%d loss=%.4f val_acc=%.4f",
                     step + 1, state.index, state.support_size, state.query_size,
                     result.meta_loss, val_acc)

    if best is None:
        best = Checkpoint(theta, cur.total_steps, 1.0 - validate(theta), fingerprint)

    metrics_path = None
    if cfg.output_dir is not None:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = write_metrics(rows, out / "metrics.csv")
        save_checkpoint(best, out / "best.ckpt")
    return TrainResult(best, theta, rows, metrics_path, schedule)


def train(cfg: TrainConfig, dists: Sequence[TaskDistribution]) -> tuple[Checkpoint, Optional[Path]]:
    result = run_training(cfg, dists)
    return result.best, result.metrics_path


def meta_test(params: ParameterSet, cfg: TrainConfig, test_dist: TaskDistribution,
              episodes: Optional[int] = None) -> tuple[float, float]:
    """Accuracy and 95% CI on unseen tasks, adapting with ``shot`` examples per class."""
    schedule = build_schedule(cfg.curriculum)
    shot = cfg.curriculum.shot
    rng = np.random.default_rng([cfg.seed, 2])
    return evaluate(params, test_dist, cfg.way, shot, shot, episodes or cfg.test_episodes,
                    eval_inner_config(cfg, schedule), rng)


# --------------------------------------------------------------------------
# experiments


def _with(cfg: TrainConfig, **curriculum_changes) -> TrainConfig:
    return replace(cfg, curriculum=replace(cfg.curriculum, **curriculum_changes))


def _run_dir(cfg: TrainConfig, name: str) -> Optional[str]:
    return None if cfg.output_dir is None else str(Path(cfg.output_dir) / name)


SWEEP_HEADER = ["multiplier", "policy", "seed", "test_acc", "ci"]


def run_sweep(base: TrainConfig, multipliers: Sequence[int], seeds: Sequence[int],
              dists: Sequence[TaskDistribution], out_path=None) -> list[dict]:
    """Train and meta-test every (multiplier, seed, query policy) combination."""
    if not multipliers or any(int(m) < 1 for m in multipliers):
        raise ValueError(f"multipliers must all be >= 1, got {list(multipliers)}")
    rows = []
    for m in multipliers:
        for seed in seeds:
            for policy in ("static", "adaptive"):
                cfg = replace(_with(base, multiplier=int(m), query_policy=policy,
                                    schedule_kind="curriculum"), seed=int(seed))
                cfg = replace(cfg, output_dir=_run_dir(base, f"M{m}_{policy}_seed{seed}"))
                result = run_training(cfg, dists)
                acc, ci = meta_test(result.best.params, cfg, dists[2])
                log.info("sweep M=%d %s seed=%d: %.4f +- %.4f", m, policy, seed, acc, ci)
                rows.append({"multiplier": int(m), "policy": policy, "seed": int(seed),
                             "test_acc": acc, "ci": ci})
    if out_path is not None:
        _write_rows(rows, SWEEP_HEADER, out_path)
    return rows


ABLATION_VARIANTS = [
    ("baseline", "Baseline MAML", dict(multiplier=1, schedule_kind="curriculum", query_policy="static")),
    ("curriculum_static", "Curriculum learning: L = shot (static)",
     dict(schedule_kind="curriculum", query_policy="static")),
    ("curriculum_adaptive", "Curriculum learning: L = K (adaptive)",
     dict(schedule_kind="curriculum", query_policy="adaptive")),
    ("static_support_static", "Static Support Size: K = M * shot, L = shot",
     dict(schedule_kind="static_support", query_policy="static")),
    ("static_support_adaptive", "Static Support Size: K = M * shot, L = K",
     dict(schedule_kind="static_support", query_policy="adaptive")),
]

ABLATION_HEADER = ["variant", "label", "seed", "test_acc", "ci", "delta"]


def run_ablation(base: TrainConfig, dists: Sequence[TaskDistribution], seeds: Sequence[int] = (),
                 out_path=None) -> list[dict]:
    """Baseline plus the four curriculum/static-support variants at the configured ``M``.

    Returns one row per (variant, seed) followed by a ``mean`` row per variant;
    ``delta`` is the difference to the baseline for the same seed.
    """
    seeds = list(seeds) or [base.seed]
    per_seed = {}
    for seed in seeds:
        for key, label, changes in ABLATION_VARIANTS:
            cfg = replace(_with(base, **changes), seed=int(seed),
                          output_dir=_run_dir(base, f"{key}_seed{seed}"))
            result = run_training(cfg, dists)
            per_seed[key, seed] = meta_test(result.best.params, cfg, dists[2])
    rows = []
    for seed in seeds:
        base_acc = per_seed["baseline", seed][0]
        for key, label, _ in ABLATION_VARIANTS:
            acc, ci = per_seed[key, seed]
            rows.append({"variant": key, "label": label, "seed": seed, "test_acc": acc,
                         "ci": ci, "delta": acc - base_acc})
    base_mean = float(np.mean([per_seed["baseline", s][0] for s in seeds]))
    for key, label, _ in ABLATION_VARIANTS:
        accs = [per_seed[key, s][0] for s in seeds]
        cis = [per_seed[key, s][1] for s in seeds]
        mean = float(np.mean(accs))
        rows.append({"variant": key, "label": label, "seed": "mean", "test_acc": mean,
                     "ci": float(np.mean(cis)), "delta": mean - base_mean})
    if out_path is not None:
        _write_rows(rows, ABLATION_HEADER, out_path)
    return rows


def _write_rows(rows, header, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in header])
    return path


def sinusoid_benchmark(steps: int = 2000, meta_batch_size: int = 4, k: int = 10, l: int = 10,
                       inner_lr: float = 0.01, outer_lr: float = 0.001, hidden=(40, 40),
                       optimizer: str = "adam", eval_tasks: int = 200, seed: int = 0) -> dict:
    """Meta-train on sinusoid regression and report held-out query MSE.

    Returns pre- and post-adaptation MSE of the trained model and the
    post-adaptation MSE of the untrained initialization.
    """
    dist = Sinusoids()
    theta0 = init_params(FfnSpec(1, tuple(hidden), 1), seed)
    theta = theta0
    rng = np.random.default_rng(seed)
    opt = Adam(outer_lr) if optimizer == "adam" else SGD(outer_lr)
    inner = InnerConfig(inner_lr)
    for _ in range(steps):
        episodes = [dist.sample_episode(1, k, l, rng) for _ in range(meta_batch_size)]
        theta, _ = meta_step(theta, episodes, inner, outer_lr, opt)
    pre, post = evaluate_regression(theta, dist, k, l, eval_tasks, inner, np.random.default_rng([seed, 2]))
    _, untrained_post = evaluate_regression(theta0, dist, k, l, eval_tasks, inner,
                                            np.random.default_rng([seed, 2]))
    return {"pre_mse": pre, "post_mse": post, "untrained_post_mse": untrained_post, "params": theta}
