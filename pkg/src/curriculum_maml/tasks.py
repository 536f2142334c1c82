"""Episodic task distributions and the flat binary image archive.

Three sources of episodes are provided:

* :class:`GaussianBlobs` - every task draws fresh class centers in ``[-1, 1]^dim``
  and examples are centers plus isotropic noise; unlimited data.
* :class:`Sinusoids` - regression tasks ``y = A sin(x + phase)``.
* :class:`ArchiveTasks` - a class split of an :class:`ImageArchive`; examples
  are drawn without replacement, so per-class supply is finite.

All sampling takes an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"FSIA"
VERSION = 1


class InsufficientDataError(ValueError):
    """A split cannot supply the classes or examples an episode needs."""


class ArchiveFormatError(ValueError):
    """Base class for archive parsing problems."""


class MalformedHeaderError(ArchiveFormatError):
    pass


class TruncatedArchiveError(ArchiveFormatError):
    pass


@dataclass(frozen=True, eq=False)
class Episode:
    """One task instance: ``k`` support and ``l`` query examples per class.

    For regression episodes ``way`` is 1 and the ``*_y`` arrays hold float
    targets of shape ``[n, 1]``.
    """

    way: int
    k: int
    l: int
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    regression: bool = False
    # underlying example ids, (class, index) pairs; used for disjointness checks
    support_ids: tuple = field(default=(), repr=False)
    query_ids: tuple = field(default=(), repr=False)

    @property
    def dim(self) -> int:
        return self.support_x.shape[1]


def _classification_episode(way, k, l, support, query, rng, support_ids=(), query_ids=()):
    # episode-local labels are a random permutation of 0..way-1
    labels = rng.permutation(way)
    sx = np.concatenate(support, axis=0)
    qx = np.concatenate(query, axis=0)
    sy = np.repeat(labels, k)
    qy = np.repeat(labels, l)
    return Episode(way, k, l, sx, sy, qx, qy, False, tuple(support_ids), tuple(query_ids))


class TaskDistribution:
    """Distribution over tasks for one data split."""

    kind: str = ""
    split: str = "train"
    regression: bool = False

    @property
    def input_dim(self) -> int:
        raise NotImplementedError

    def max_examples_per_class(self) -> float:
        """Smallest per-class supply across the pool (``inf`` when generated)."""
        return math.inf

    def num_classes(self) -> float:
        return math.inf

    def sample_episode(self, way: int, k: int, l: int, rng: np.random.Generator) -> Episode:
        raise NotImplementedError


def _check_sizes(way, k, l):
    if way < 1 or k < 1 or l < 1:
        raise ValueError(f"way, k and l must be positive, got way={way}, k={k}, l={l}")


# --------------------------------------------------------------------------
# Gaussian blobs


@dataclass(frozen=True)
class BlobTask:
    """A single blob task: ``way`` centers sharing noise scale ``sigma``."""

    centers: np.ndarray
    sigma: float

    @property
    def way(self) -> int:
        return self.centers.shape[0]

    def sample(self, label: int, n: int, rng: np.random.Generator) -> np.ndarray:
        noise = rng.standard_normal((n, self.centers.shape[1]))
        return self.centers[label] + self.sigma * noise

    def nearest_center(self, x: np.ndarray) -> np.ndarray:
        d = ((x[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=-1)
        return d.argmin(axis=1)


def gaussian_blob_task(rng: np.random.Generator, way: int, dim: int, sigma: float = 0.35) -> BlobTask:
    if dim < 2:
        raise ValueError(f"gaussian blobs need dim >= 2, got {dim}")
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    return BlobTask(rng.uniform(-1.0, 1.0, size=(way, dim)), float(sigma))


@dataclass(frozen=True)
class GaussianBlobs(TaskDistribution):
    dim: int = 8
    sigma: float = 0.35
    split: str = "train"
    kind = "gaussian_blobs"

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError(f"gaussian blobs need dim >= 2, got {self.dim}")

    @property
    def input_dim(self) -> int:
        return self.dim

    def sample_episode(self, way, k, l, rng):
        _check_sizes(way, k, l)
        task = gaussian_blob_task(rng, way, self.dim, self.sigma)
        support = [task.sample(c, k, rng) for c in range(way)]
        query = [task.sample(c, l, rng) for c in range(way)]
        return _classification_episode(way, k, l, support, query, rng)


def bayes_accuracy(dim: int = 8, sigma: float = 0.35, way: int = 5,
                   samples: int = 10_000, seed: int = 0) -> float:
    """Monte-Carlo accuracy of classifying by the true nearest center.

    This is the ceiling any learner can approach on :class:`GaussianBlobs`.
    """
    rng = np.random.default_rng(seed)
    correct = 0
    per_task = 100
    tasks = max(1, samples // per_task)
    for _ in range(tasks):
        task = gaussian_blob_task(rng, way, dim, sigma)
        labels = rng.integers(0, way, size=per_task)
        x = task.centers[labels] + sigma * rng.standard_normal((per_task, dim))
        correct += int((task.nearest_center(x) == labels).sum())
    return correct / (tasks * per_task)


# --------------------------------------------------------------------------
# sinusoid regression


@dataclass(frozen=True)
class SinusoidTask:
    amplitude: float
    phase: float

    def __call__(self, x):
        return self.amplitude * np.sin(np.asarray(x, dtype=np.float64) + self.phase)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        x = rng.uniform(-5.0, 5.0, size=(n, 1))
        return x, self(x)


def sinusoid_task(rng: np.random.Generator) -> SinusoidTask:
    """Amplitude in U[0.1, 5.0], phase in U[0, pi]."""
    amplitude = rng.uniform(0.1, 5.0)
    phase = rng.uniform(0.0, np.pi)
    return SinusoidTask(float(amplitude), float(phase))


@dataclass(frozen=True)
class Sinusoids(TaskDistribution):
    """Regression tasks; ``k`` and ``l`` count support and query points."""

    split: str = "train"
    kind = "sinusoid"
    regression = True

    @property
    def input_dim(self) -> int:
        return 1

    def sample_episode(self, way, k, l, rng):
        if way != 1:
            raise ValueError(f"sinusoid tasks are regression tasks (way=1), got way={way}")
        _check_sizes(way, k, l)
        task = sinusoid_task(rng)
        sx, sy = task.sample(k, rng)
        qx, qy = task.sample(l, rng)
        return Episode(1, k, l, sx, sy, qx, qy, regression=True)


# --------------------------------------------------------------------------
# image archive


@dataclass(eq=False)
class ImageArchive:
    """Named classes of flattened grayscale images with pixels in ``[0, 1]``."""

    names: list[str]
    images: list[np.ndarray]  # one [count, height*width] array per class
    height: int
    width: int

    def __post_init__(self):
        if len(self.names) != len(self.images):
            raise ValueError("names and images must have equal length")
        pixels = self.height * self.width
        for name, imgs in zip(self.names, self.images):
            if imgs.ndim != 2 or imgs.shape[1] != pixels:
                raise ValueError(
                    f"class {name}: images must be [count, {pixels}], got {imgs.shape}"
                )
            if imgs.shape[0] < 1:
                raise ValueError(f"class {name} has no images")

    @property
    def classes(self) -> list[tuple[str, np.ndarray]]:
        return list(zip(self.names, self.images))

    def __len__(self) -> int:
        return len(self.names)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImageArchive):
            return NotImplemented
        return (
            self.names == other.names
            and (self.height, self.width) == (other.height, other.width)
            and all(np.array_equal(a, b) for a, b in zip(self.images, other.images))
        )

    def subset(self, indices: Sequence[int]) -> "ImageArchive":
        return ImageArchive([self.names[i] for i in indices],
                            [self.images[i] for i in indices], self.height, self.width)


def save_archive(archive: ImageArchive, path) -> None:
    parts = [MAGIC, struct.pack("<IIII", VERSION, len(archive), archive.height, archive.width)]
    for name, imgs in archive.classes:
        raw = name.encode("utf-8")
        pixels = np.clip(np.rint(imgs * 255.0), 0, 255).astype(np.uint8)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", imgs.shape[0]))
        parts.append(pixels.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise TruncatedArchiveError(
                f"truncated archive reading {what}: expected {n} bytes, "
                f"found {len(self.data) - self.pos}"
            )
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk


def load_archive(path) -> ImageArchive:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"archive not found: {path}")
    reader = _Reader(path.read_bytes())
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, count, height, width = struct.unpack("<IIII", reader.take(16, "header"))
    if version != VERSION:
        raise MalformedHeaderError(f"unsupported archive version {version}")
    if height == 0 or width == 0:
        raise MalformedHeaderError(f"invalid image size {height}x{width}")
    pixels = height * width
    names, images = [], []
    for c in range(count):
        (name_len,) = struct.unpack("<H", reader.take(2, f"class {c} name length"))
        try:
            name = reader.take(name_len, f"class {c} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedHeaderError(f"class {c} name is not UTF-8") from exc
        (n_images,) = struct.unpack("<I", reader.take(4, f"class {name} image count"))
        if n_images == 0:
            raise MalformedHeaderError(f"class {name} has no images")
        raw = reader.take(n_images * pixels, f"class {name} pixels")
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(n_images, pixels)
        names.append(name)
        images.append(arr.astype(np.float64) / 255.0)
    if reader.pos != len(reader.data):
        raise MalformedHeaderError(f"{len(reader.data) - reader.pos} trailing bytes after last class")
    return ImageArchive(names, images, height, width)


def rotate_cw(images: np.ndarray, height: int, width: int, quarter_turns: int = 1) -> np.ndarray:
    """Rotate flattened images clockwise by ``90 * quarter_turns`` degrees."""
    grid = images.reshape(-1, height, width)
    return np.rot90(grid, k=-quarter_turns, axes=(1, 2)).reshape(images.shape[0], -1)


def augment_rotations(archive: ImageArchive) -> ImageArchive:
    """Add 90/180/270 degree rotated copies of every class as new classes."""
    if archive.height != archive.width:
        raise ValueError(
            f"rotation augmentation needs square images, got {archive.height}x{archive.width}"
        )
    names, images = [], []
    for name, imgs in archive.classes:
        names.append(name)
        images.append(imgs)
        for turns in (1, 2, 3):
            names.append(f"{name}_r{90 * turns}")
            images.append(rotate_cw(imgs, archive.height, archive.width, turns))
    return ImageArchive(names, images, archive.height, archive.width)


@dataclass(frozen=True, eq=False)
class ArchiveTasks(TaskDistribution):
    """Episodes drawn from the classes of one archive split."""

    archive: ImageArchive
    split: str = "train"
    kind = "archive"

    @property
    def input_dim(self) -> int:
        return self.archive.height * self.archive.width

    def max_examples_per_class(self) -> float:
        return min(imgs.shape[0] for imgs in self.archive.images)

    def num_classes(self) -> float:
        return len(self.archive)

    def check_supply(self, way: int, per_class: int) -> None:
        """Raise :class:`InsufficientDataError` unless every class can serve ``per_class``."""
        if len(self.archive) < way:
            raise InsufficientDataError(
                f"{self.split} split has {len(self.archive)} classes < {way} required"
            )
        for name, imgs in self.archive.classes:
            if imgs.shape[0] < per_class:
                raise InsufficientDataError(
                    f"class {name} has {imgs.shape[0]} < {per_class} required"
                )

    def sample_episode(self, way, k, l, rng):
        _check_sizes(way, k, l)
        if len(self.archive) < way:
            raise InsufficientDataError(
                f"{self.split} split has {len(self.archive)} classes < {way} required"
            )
        chosen = rng.choice(len(self.archive), size=way, replace=False)
        need = k + l
        for c in chosen:
            have = self.archive.images[c].shape[0]
            if have < need:
                raise InsufficientDataError(
                    f"class {self.archive.names[c]} has {have} < {need} required"
                )
        support, query, s_ids, q_ids = [], [], [], []
        for c in chosen:
            imgs = self.archive.images[c]
            picks = rng.choice(imgs.shape[0], size=need, replace=False)
            support.append(imgs[picks[:k]])
            query.append(imgs[picks[k:]])
            s_ids.extend((int(c), int(i)) for i in picks[:k])
            q_ids.extend((int(c), int(i)) for i in picks[k:])
        return _classification_episode(way, k, l, support, query, rng, s_ids, q_ids)


def split_classes(archive: ImageArchive, sizes, rng_seed: int,
                  augment: bool = False) -> tuple[ArchiveTasks, ArchiveTasks, ArchiveTasks]:
    """Partition classes into train/validation/test pools.

    ``sizes`` holds three class counts, or three fractions summing to at most
    1. With ``augment=True`` each pool is rotation-augmented after splitting,
    so rotated copies never cross split boundaries.
    """
    sizes = list(sizes)
    if len(sizes) != 3:
        raise ValueError(f"expected three split sizes, got {sizes}")
    total = len(archive)
    if all(isinstance(s, float) for s in sizes):
        if any(s < 0 for s in sizes) or sum(sizes) > 1.0 + 1e-12:
            raise ValueError(f"split fractions must be non-negative and sum to <= 1, got {sizes}")
        counts = [int(math.floor(s * total)) for s in sizes]
    else:
        counts = [int(s) for s in sizes]
    if any(c < 0 for c in counts):
        raise ValueError(f"split counts must be non-negative, got {counts}")
    if sum(counts) > total:
        raise InsufficientDataError(
            f"split counts {counts} need {sum(counts)} classes, archive has {total}"
        )
    order = np.random.default_rng(rng_seed).permutation(total)
    bounds = np.cumsum([0, *counts])
    out = []
    for split, lo, hi in zip(("train", "validation", "test"), bounds[:-1], bounds[1:]):
        part = archive.subset(order[lo:hi].tolist())
        if augment:
            part = augment_rotations(part)
        out.append(ArchiveTasks(part, split))
    return tuple(out)


def synthetic_archive(num_classes: int, per_class: int, size: int = 8, seed: int = 0,
                      prefix: str = "class") -> ImageArchive:
    """Random grayscale archive (pixels quantised to 1/255) for tests and demos."""
    rng = np.random.default_rng(seed)
    images = [rng.integers(0, 256, size=(per_class, size * size)) / 255.0
              for _ in range(num_classes)]
    names = [f"{prefix}{i:04d}" for i in range(num_classes)]
    return ImageArchive(names, images, size, size)
