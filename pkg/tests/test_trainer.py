import csv

import numpy as np
import pytest

from curriculum_maml.curriculum import CurriculumConfig, build_schedule
from curriculum_maml.model import ParameterSet, init_params, FfnSpec
from curriculum_maml.tasks import GaussianBlobs, InsufficientDataError, Sinusoids, split_classes, synthetic_archive
from curriculum_maml.trainer import (
    ABLATION_VARIANTS,
    Checkpoint,
    CheckpointError,
    TrainConfig,
    checkpoint_bytes,
    load_checkpoint,
    meta_test,
    read_metrics,
    run_ablation,
    run_sweep,
    run_training,
    save_checkpoint,
    sinusoid_benchmark,
)


def blobs():
    return tuple(GaussianBlobs(dim=4, split=s) for s in ("train", "val", "test"))


def small_cfg(**kw):
    cur = dict(multiplier=3, shot=1, total_steps=12, base_inner_lr=0.5)
    cur.update(kw.pop("curriculum", {}))
    base = dict(curriculum=CurriculumConfig(**cur), way=3, hidden=(8,), meta_batch_size=2,
                val_every=5, val_episodes=4, test_episodes=4)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- training loop


def test_validation_cadence_and_step_count():
    cfg = small_cfg(curriculum=dict(total_steps=10))
    result = run_training(cfg, blobs())
    assert len(result.metrics) == 10
    assert [r["step"] for r in result.metrics if r["val_acc"] is not None] == [4, 9]
    assert result.best.step in (5, 10)


def test_trace_follows_schedule():
    cfg = small_cfg(curriculum=dict(total_steps=30, query_policy="adaptive"))
    result = run_training(cfg, blobs())
    sched = build_schedule(cfg.curriculum)
    for row in result.metrics:
        state = sched.state_at(row["step"])
        assert (row["stage"], row["K"], row["L"], row["alpha"]) == (
            state.index, state.support_size, state.query_size, state.inner_lr)
    assert [r["K"] for r in result.metrics][0] == 3 and result.metrics[-1]["K"] == 1


def test_validation_uses_shot_regardless_of_stage(monkeypatch):
    seen = []
    import curriculum_maml.trainer as trainer_mod

    real = trainer_mod.evaluate

    def spy(params, dist, way, k, l, episodes, inner_cfg, rng):
        seen.append((k, l, inner_cfg.inner_lr))
        return real(params, dist, way, k, l, episodes, inner_cfg, rng)

    monkeypatch.setattr(trainer_mod, "evaluate", spy)
    cfg = small_cfg(curriculum=dict(total_steps=20, shot=2, query_policy="adaptive"))
    run_training(cfg, blobs())
    final_lr = build_schedule(cfg.curriculum).final.inner_lr
    assert seen and all(s == (2, 2, final_lr) for s in seen)


def test_no_validation_point_validates_final_params():
    cfg = small_cfg(curriculum=dict(total_steps=5), val_every=100)
    result = run_training(cfg, blobs())
    assert result.best.step == 5
    assert result.best.params == result.final_params


def test_metrics_deterministic(tmp_path):
    def run(d):
        cfg = small_cfg(output_dir=str(tmp_path / d))
        return run_training(cfg, blobs()).metrics_path

    def strip(path):
        with open(path) as fh:
            return [{k: v for k, v in r.items() if k != "wall_ms"} for r in csv.DictReader(fh)]

    a, b = run("a"), run("b")
    assert strip(a) == strip(b)
    assert (tmp_path / "a" / "best.ckpt").read_bytes() == (tmp_path / "b" / "best.ckpt").read_bytes()


def test_metrics_round_trip(tmp_path):
    result = run_training(small_cfg(output_dir=str(tmp_path)), blobs())
    rows = read_metrics(result.metrics_path)
    assert [r["train_loss"] for r in rows] == [r["train_loss"] for r in result.metrics]
    assert [r["val_acc"] for r in rows] == [r["val_acc"] for r in result.metrics]


def test_regression_distribution_rejected():
    with pytest.raises(ValueError, match="sinusoid_benchmark"):
        run_training(small_cfg(), (Sinusoids(), Sinusoids(), Sinusoids()))


def test_invalid_train_config():
    with pytest.raises(ValueError):
        run_training(small_cfg(val_every=0), blobs())
    with pytest.raises(ValueError):
        run_training(small_cfg(optimizer="rmsprop"), blobs())


# ---------------------------------------------------------------- preflight


def test_preflight_rejects_small_archive():
    archive = synthetic_archive(30, 20, size=4, seed=0)
    dists = split_classes(archive, (10, 10, 10), rng_seed=0)
    cfg = small_cfg(curriculum=dict(multiplier=5, shot=5, total_steps=10))
    # stage 0 needs K + L = 25 + 5 = 30 examples per class
    with pytest.raises(InsufficientDataError, match="20 < 30"):
        run_training(cfg, dists)


def test_archive_training_runs():
    archive = synthetic_archive(30, 8, size=4, seed=0)
    dists = split_classes(archive, (10, 10, 10), rng_seed=0)
    result = run_training(small_cfg(curriculum=dict(multiplier=2, total_steps=6)), dists)
    assert len(result.metrics) == 6


# ---------------------------------------------------------------- checkpoints


def _ckpt():
    return Checkpoint(init_params(FfnSpec(3, (4,), 2), 0), 17, 0.25, 12345)


def test_checkpoint_round_trip_bytes(tmp_path):
    path = save_checkpoint(_ckpt(), tmp_path / "c.ckpt")
    loaded = load_checkpoint(path)
    assert loaded.params == _ckpt().params
    assert (loaded.step, loaded.val_error, loaded.fingerprint) == (17, 0.25, 12345)
    assert checkpoint_bytes(loaded) == path.read_bytes()


def test_truncated_checkpoint(tmp_path):
    path = save_checkpoint(_ckpt(), tmp_path / "c.ckpt")
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(b"CMLC")
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "c.ckpt"
    path.write_bytes(b"XXXX" + checkpoint_bytes(_ckpt())[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_fingerprint_mismatch_warns(tmp_path):
    path = save_checkpoint(_ckpt(), tmp_path / "c.ckpt")
    with pytest.warns(UserWarning, match="fingerprint"):
        loaded = load_checkpoint(path, expected_fingerprint=1)
    assert loaded.fingerprint_mismatch
    assert not load_checkpoint(path, expected_fingerprint=12345).fingerprint_mismatch


def test_fingerprint_ignores_output_dir():
    assert small_cfg(output_dir="a").fingerprint() == small_cfg(output_dir="b").fingerprint()
    assert small_cfg(seed=1).fingerprint() != small_cfg(seed=2).fingerprint()


# ---------------------------------------------------------------- experiments


def test_meta_test_deterministic():
    cfg = small_cfg()
    params = init_params(FfnSpec(4, (8,), 3), 0)
    assert meta_test(params, cfg, blobs()[2]) == meta_test(params, cfg, blobs()[2])


def test_sweep_rows(tmp_path):
    cfg = small_cfg(curriculum=dict(total_steps=4), val_every=2)
    rows = run_sweep(cfg, [1, 2], [0, 1], blobs(), tmp_path / "sweep.csv")
    assert len(rows) == 2 * 2 * 2
    assert {(r["multiplier"], r["policy"]) for r in rows} == {
        (m, p) for m in (1, 2) for p in ("static", "adaptive")}
    with open(tmp_path / "sweep.csv") as fh:
        assert len(fh.read().splitlines()) == 9
    with pytest.raises(ValueError):
        run_sweep(cfg, [0], [0], blobs())


def test_ablation_rows(tmp_path):
    cfg = small_cfg(curriculum=dict(total_steps=4), val_every=2)
    rows = run_ablation(cfg, blobs(), [0], tmp_path / "ablation.csv")
    per_seed = [r for r in rows if r["seed"] == 0]
    assert len(per_seed) == len(ABLATION_VARIANTS) == 5
    assert per_seed[0]["variant"] == "baseline" and per_seed[0]["delta"] == 0.0
    means = [r for r in rows if r["seed"] == "mean"]
    assert len(means) == 5 and means[0]["delta"] == 0.0


def test_sinusoid_benchmark_short_run():
    out = sinusoid_benchmark(steps=20, eval_tasks=5, hidden=(10,))
    assert set(out) == {"pre_mse", "post_mse", "untrained_post_mse", "params"}
    assert isinstance(out["params"], ParameterSet)
    assert np.isfinite(out["post_mse"])


def test_single_multiplier_sweep_matches_direct_run():
    cfg = small_cfg(curriculum=dict(multiplier=1, total_steps=6))
    rows = run_sweep(cfg, [1], [0], blobs())
    static = next(r for r in rows if r["policy"] == "static")
    direct = run_training(cfg, blobs())
    assert (static["test_acc"], static["ci"]) == meta_test(direct.best.params, cfg, blobs()[2])


def test_stage_switches_match_boundaries():
    cfg = small_cfg(curriculum=dict(total_steps=40))
    rows = run_training(cfg, blobs()).metrics
    switches = [r["step"] for prev, r in zip(rows, rows[1:]) if r["stage"] != prev["stage"]]
    assert switches == build_schedule(cfg.curriculum).boundaries
