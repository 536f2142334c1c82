"""Flat ``dotted.key = value`` run configuration.

Example file::

    # 5-way 1-shot blobs, curriculum with five stages
    task.kind = gaussian_blobs
    curriculum.multiplier = 5
    curriculum.query_policy = adaptive

Unknown keys are rejected; every value is coerced to the type of its default.
"""

from __future__ import annotations

from pathlib import Path

from .curriculum import CurriculumConfig
from .tasks import GaussianBlobs, load_archive, split_classes
from .trainer import TrainConfig

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "task.kind": "gaussian_blobs",
    "task.dim": 8,
    "task.sigma": 0.35,
    "task.archive": "",
    "task.split": "1100,100,423",
    "task.split_seed": 0,
    "task.augment": False,
    "curriculum.multiplier": 5,
    "curriculum.shot": 1,
    "curriculum.steps": 6000,
    "curriculum.inner_lr": 0.5,
    "curriculum.query_policy": "static",
    "curriculum.schedule": "curriculum",
    "curriculum.static_scaled_lr": False,
    "model.hidden": "64,64",
    "train.way": 5,
    "train.outer_lr": 0.1,
    "train.meta_batch_size": 4,
    "train.inner_steps": 1,
    "train.first_order": False,
    "train.optimizer": "sgd",
    "train.val_every": 250,
    "train.val_episodes": 200,
    "train.test_episodes": 600,
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw) -> object:
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        raw = str(raw).lower() if isinstance(raw, bool) else str(raw)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_text(text: str, source: str = "<string>") -> dict[str, object]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def load_config(path=None, overrides: dict | None = None) -> dict[str, object]:
    """Defaults, then the file at ``path``, then ``overrides``; fully resolved."""
    resolved = dict(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        resolved.update(parse_text(path.read_text(), str(path)))
    for key, raw in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        resolved[key] = _coerce(key, raw)
    validate(resolved)
    return resolved


def parse_int_list(text: str, what: str) -> list[int]:
    try:
        values = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{what}: expected comma-separated integers, got {text!r}") from None
    if not values:
        raise ConfigError(f"{what}: empty list")
    return values


def validate(conf: dict) -> None:
    hidden = parse_int_list(conf["model.hidden"], "model.hidden")
    if any(h < 1 for h in hidden):
        raise ConfigError(f"model.hidden: sizes must be positive, got {hidden}")
    if conf["task.kind"] not in ("gaussian_blobs", "archive"):
        raise ConfigError(f"task.kind must be gaussian_blobs or archive, got {conf['task.kind']!r}")
    if conf["task.kind"] == "archive" and not conf["task.archive"]:
        raise ConfigError("task.archive must name an archive file when task.kind = archive")
    try:
        train_config(conf).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train_config(conf: dict, output_dir=None) -> TrainConfig:
    curriculum = CurriculumConfig(
        multiplier=conf["curriculum.multiplier"],
        shot=conf["curriculum.shot"],
        total_steps=conf["curriculum.steps"],
        base_inner_lr=conf["curriculum.inner_lr"],
        query_policy=conf["curriculum.query_policy"],
        schedule_kind=conf["curriculum.schedule"],
        static_scaled_lr=conf["curriculum.static_scaled_lr"],
    )
    return TrainConfig(
        curriculum=curriculum,
        way=conf["train.way"],
        hidden=tuple(parse_int_list(conf["model.hidden"], "model.hidden")),
        outer_lr=conf["train.outer_lr"],
        meta_batch_size=conf["train.meta_batch_size"],
        inner_steps=conf["train.inner_steps"],
        first_order=conf["train.first_order"],
        optimizer=conf["train.optimizer"],
        val_every=conf["train.val_every"],
        val_episodes=conf["train.val_episodes"],
        test_episodes=conf["train.test_episodes"],
        seed=conf["seed"],
        output_dir=None if output_dir is None else str(output_dir),
    )


def build_distributions(conf: dict):
    """Train, validation and test task distributions for the configured task."""
    if conf["task.kind"] == "gaussian_blobs":
        return tuple(GaussianBlobs(conf["task.dim"], conf["task.sigma"], split)
                     for split in ("train", "validation", "test"))
    archive = load_archive(conf["task.archive"])
    parts = [p.strip() for p in str(conf["task.split"]).split(",")]
    try:
        sizes = [float(p) if "." in p else int(p) for p in parts]
    except ValueError:
        raise ConfigError(f"task.split: cannot parse {conf['task.split']!r}") from None
    return split_classes(archive, sizes, conf["task.split_seed"], augment=conf["task.augment"])


def dump(conf: dict) -> str:
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in conf.items())
