"""Datasets, worker partitioning, and mini-batch sampling.

A Dataset is an in-memory matrix of float64 features scaled to [0, 1] plus an
int64 label per row.  A Shard is simply an index array into a Dataset, so
partitions never copy feature rows.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, IdxFormatError

log = logging.getLogger(__name__)

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

# A shard is an index array into a Dataset.
Shard = np.ndarray


@dataclass
class Dataset:
    features: np.ndarray  # (n, d_in) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64 in [0, n_classes)
    n_classes: int

    def __post_init__(self) -> None:
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be (n, d_in) with one label per row")
        if len(self.features) < 1:
            raise ValueError("dataset must contain at least one sample")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain non-finite values")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError("labels outside [0, n_classes)")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def d_in(self) -> int:
        return self.features.shape[1]


@dataclass
class MiniBatch:
    features: np.ndarray  # (b, d_in)
    labels: np.ndarray  # (b,)


@dataclass
class PartitionSpec:
    """How to split a dataset across workers.

    mode "iid" deals a uniform shuffle round-robin style; mode "by_class"
    gives each worker samples from `classes_per_worker` classes only, with the
    class-to-worker assignment drawn round-robin from a seed-shuffled class
    list so that every class is held by at least one worker.
    """

    mode: str
    workers: int
    classes_per_worker: int | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("iid", "by_class"):
            raise ConfigError(f"partition_mode must be 'iid' or 'by_class', got {self.mode!r}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.mode == "by_class" and (self.classes_per_worker is None or self.classes_per_worker < 1):
            raise ConfigError("classes_per_worker must be >= 1 in by_class mode")


def gen_synthetic(
    classes: int, per_class: int, d_in: int, spread: float, rng: np.random.Generator
) -> Dataset:
    """Gaussian blobs around random unit-sphere centers, min-max scaled to [0, 1].

    Rows come out grouped by class: all `per_class` samples of class 0 first,
    then class 1, and so on.
    """
    if classes < 2:
        raise ValueError(f"classes must be >= 2, got {classes}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if d_in < 1:
        raise ValueError(f"d_in must be >= 1, got {d_in}")
    if spread < 0:
        raise ValueError(f"spread must be >= 0, got {spread}")
    centers = rng.standard_normal((classes, d_in))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    features = np.repeat(centers, per_class, axis=0)
    if spread > 0:
        features = features + spread * rng.standard_normal(features.shape)
    labels = np.repeat(np.arange(classes), per_class)
    lo = features.min(axis=0)
    span = features.max(axis=0) - lo
    flat = span < 1e-12
    span[flat] = 1.0
    features = (features - lo) / span
    features[:, flat] = 0.0
    return Dataset(features, labels, n_classes=classes)


def take(ds: Dataset, indices: np.ndarray) -> Dataset:
    """Sub-dataset at the given row indices, keeping the class count."""
    idx = np.asarray(indices, dtype=np.int64)
    return Dataset(ds.features[idx], ds.labels[idx], n_classes=ds.n_classes)


def split_per_class(ds: Dataset, train_per_class: int) -> tuple[Dataset, Dataset]:
    """Stratified split: the first `train_per_class` rows of every class go to
    the train set, the rest to the test set."""
    train_idx, test_idx = [], []
    for c in range(ds.n_classes):
        rows = np.flatnonzero(ds.labels == c)
        if len(rows) <= train_per_class:
            raise ValueError(
                f"class {c} has {len(rows)} samples, need more than {train_per_class} to split"
            )
        train_idx.append(rows[:train_per_class])
        test_idx.append(rows[train_per_class:])
    return take(ds, np.concatenate(train_idx)), take(ds, np.concatenate(test_idx))


def _read_exact(f, count: int, path: str, offset: int) -> bytes:
    raw = f.read(count)
    if len(raw) != count:
        raise IdxFormatError(
            f"{path}: truncated at byte offset {offset}: expected {count} bytes, got {len(raw)}"
        )
    return raw


def _read_be_i32(f, path: str, offset: int) -> int:
    return struct.unpack(">i", _read_exact(f, 4, path, offset))[0]


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Load an IDX image/label pair (the classic big-endian MNIST format)."""
    with open(images_path, "rb") as f:
        magic = _read_be_i32(f, images_path, 0)
        if magic != IMAGE_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad magic {magic} at byte offset 0 (expected {IMAGE_MAGIC})"
            )
        count = _read_be_i32(f, images_path, 4)
        rows = _read_be_i32(f, images_path, 8)
        cols = _read_be_i32(f, images_path, 12)
        if min(count, rows, cols) < 1:
            raise IdxFormatError(f"{images_path}: non-positive dimensions {(count, rows, cols)}")
        payload = f.read()
        expected = count * rows * cols
        if len(payload) != expected:
            raise IdxFormatError(
                f"{images_path}: expected {expected} data bytes after byte offset 16,"
                f" got {len(payload)}"
            )
    with open(labels_path, "rb") as f:
        magic = _read_be_i32(f, labels_path, 0)
        if magic != LABEL_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad magic {magic} at byte offset 0 (expected {LABEL_MAGIC})"
            )
        n_labels = _read_be_i32(f, labels_path, 4)
        label_bytes = f.read()
        if len(label_bytes) != n_labels:
            raise IdxFormatError(
                f"{labels_path}: expected {n_labels} data bytes after byte offset 8,"
                f" got {len(label_bytes)}"
            )
    if n_labels != count:
        raise IdxFormatError(
            f"label count {n_labels} in {labels_path} does not match image count {count}"
        )
    features = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    features = features.reshape(count, rows * cols)
    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    return Dataset(features, labels, n_classes=int(labels.max()) + 1)


def partition(ds: Dataset, spec: PartitionSpec, rng: np.random.Generator) -> list[Shard]:
    """Split a dataset into per-worker shards.

    Shards are always pairwise disjoint and their sizes differ by at most one.
    In iid mode every sample is used.  In by_class mode a worker only ever
    sees its assigned classes; when class supplies cannot fill every worker's
    quota, the surplus samples are dropped to keep shard sizes balanced.
    """
    m = spec.workers
    if spec.mode == "iid":
        perm = rng.permutation(ds.n)
        base, extra = divmod(ds.n, m)
        shards, pos = [], 0
        for j in range(m):
            size = base + (1 if j < extra else 0)
            shards.append(perm[pos : pos + size])
            pos += size
        return shards

    c = spec.classes_per_worker
    n_classes = ds.n_classes
    if c > n_classes:
        raise ConfigError(f"classes_per_worker={c} exceeds the {n_classes} dataset classes")
    if m * c < n_classes:
        raise ConfigError(
            f"classes_per_worker={c} with workers={m} cannot cover all {n_classes} classes"
        )
    shuffled = rng.permutation(n_classes)
    class_sets = [[int(shuffled[(j * c + t) % n_classes]) for t in range(c)] for j in range(m)]
    pools = {int(cls): list(rng.permutation(np.flatnonzero(ds.labels == cls))) for cls in range(n_classes)}
    base, extra = divmod(ds.n, m)
    quota = [base + (1 if j < extra else 0) for j in range(m)]
    shards: list[list[int]] = [[] for _ in range(m)]
    while True:
        eligible = [
            j
            for j in range(m)
            if len(shards[j]) < quota[j] and any(pools[cls] for cls in class_sets[j])
        ]
        if not eligible:
            break
        j = min(eligible, key=lambda jj: (len(shards[jj]), jj))
        cls = max(class_sets[j], key=lambda cc: len(pools[cc]))
        shards[j].append(pools[cls].pop())
    floor = min(len(s) for s in shards)
    dropped = sum(len(pool) for pool in pools.values())
    for j in range(m):
        if len(shards[j]) > floor + 1:
            dropped += len(shards[j]) - (floor + 1)
            shards[j] = shards[j][: floor + 1]
    if floor == 0:
        raise ConfigError(
            "by_class partition left at least one worker without samples;"
            " check classes_per_worker against the class supplies"
        )
    if dropped:
        log.info("by_class partition dropped %d samples to keep shards balanced", dropped)
    return [np.asarray(s, dtype=np.int64) for s in shards]


def sample_minibatch(shard: Shard, ds: Dataset, batch_size: int, rng: np.random.Generator) -> MiniBatch:
    """Uniform sampling with replacement from one shard."""
    if len(shard) == 0:
        raise ValueError("cannot sample from an empty shard")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    picks = shard[rng.integers(0, len(shard), size=batch_size)]
    return MiniBatch(ds.features[picks], ds.labels[picks])
