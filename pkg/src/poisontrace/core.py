"""Datasets, owner partitions and misclassification events."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from os import PathLike
from typing import Iterator, Optional, Sequence

import numpy as np

from poisontrace._io import atomic_write_bytes, atomic_write_text

DATASET_MAGIC = "PTDS"
DATASET_VERSION = 1
PARTITION_FORMAT = "poisontrace-partition"
PARTITION_VERSION = 1


class PartitionError(ValueError):
    """Raised when a partition cannot be built or fails validation."""


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: int


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Row-major feature matrix with integer labels in ``[0, num_classes)``."""

    X: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        y = np.array(self.y, dtype=np.int64)
        if X.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise ValueError("label count does not match sample count")
        if X.shape[0] == 0:
            raise ValueError("dataset is empty")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.X[i], int(self.y[i]))

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= len(self)):
            raise IndexError("subset index out of range")
        return LabeledDataset(self.X[indices], self.y[indices], self.num_classes)

    def with_rows(self, X: np.ndarray, y: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(X, y, self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)


@dataclass(frozen=True, eq=False)
class OwnerPartition:
    """Disjoint, covering assignment of dataset indices to ``m`` owners.

    ``malicious_flags`` is evaluation-only ground truth; scoring code reads
    ``index_sets`` and nothing else.
    """

    index_sets: tuple
    dataset_size: int
    malicious_flags: tuple = field(default=())

    def __post_init__(self):
        sets = tuple(np.sort(np.asarray(s, dtype=np.int64)) for s in self.index_sets)
        for s in sets:
            s.setflags(write=False)
        flags = tuple(bool(f) for f in self.malicious_flags) or (False,) * len(sets)
        object.__setattr__(self, "index_sets", sets)
        object.__setattr__(self, "malicious_flags", flags)
        self.validate()

    @property
    def owner_count(self) -> int:
        return len(self.index_sets)

    def sizes(self) -> np.ndarray:
        return np.array([s.size for s in self.index_sets])

    def owner_of(self) -> np.ndarray:
        """Owner id for every dataset index."""
        owner = np.empty(self.dataset_size, dtype=np.int64)
        for i, s in enumerate(self.index_sets):
            owner[s] = i
        return owner

    def validate(self) -> None:
        if not self.index_sets:
            raise PartitionError("partition has no owners")
        if len(self.malicious_flags) != len(self.index_sets):
            raise PartitionError("one malicious flag per owner is required")
        if any(s.size == 0 for s in self.index_sets):
            raise PartitionError("every owner needs at least one sample")
        allidx = np.concatenate(self.index_sets)
        if allidx.min() < 0 or allidx.max() >= self.dataset_size:
            raise PartitionError("partition index out of range")
        if allidx.size != self.dataset_size or np.unique(allidx).size != allidx.size:
            raise PartitionError("index sets must be disjoint and cover the dataset")

    def with_flags(self, flags: Sequence[bool]) -> "OwnerPartition":
        return OwnerPartition(self.index_sets, self.dataset_size, tuple(flags))

    def to_dict(self) -> dict:
        return {
            "format": PARTITION_FORMAT,
            "version": PARTITION_VERSION,
            "owner_count": self.owner_count,
            "dataset_size": self.dataset_size,
            "index_sets": [s.tolist() for s in self.index_sets],
            "malicious_flags": list(self.malicious_flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OwnerPartition":
        if d.get("format") != PARTITION_FORMAT:
            raise PartitionError("not a partition file")
        if d.get("version") != PARTITION_VERSION:
            raise PartitionError(f"unsupported partition version {d.get('version')}")
        part = cls(tuple(d["index_sets"]), int(d["dataset_size"]), tuple(d["malicious_flags"]))
        if part.owner_count != d["owner_count"]:
            raise PartitionError("owner_count does not match index sets")
        return part


@dataclass(frozen=True, eq=False)
class MisclassificationEvent:
    """A deployment-time input with the (wrong) label the model produced."""

    x: np.ndarray
    y_atk: int
    y_true: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64))
        if self.y_true is not None and int(self.y_true) == int(self.y_atk):
            raise ValueError("a misclassification event needs y_atk != y_true")

    def as_sample(self) -> Sample:
        return Sample(self.x, int(self.y_atk))

    def to_dict(self) -> dict:
        return {"x": self.x.tolist(), "y_atk": int(self.y_atk),
                "y_true": None if self.y_true is None else int(self.y_true)}

    @classmethod
    def from_dict(cls, d: dict) -> "MisclassificationEvent":
        return cls(np.asarray(d["x"]), int(d["y_atk"]), d.get("y_true"))


def largest_remainder(quotas: np.ndarray) -> np.ndarray:
    """Round nonnegative ``quotas`` to integers preserving their (integer) sum."""
    quotas = np.asarray(quotas, dtype=np.float64)
    total = int(round(quotas.sum()))
    counts = np.floor(quotas).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(quotas - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition_dirichlet(dataset: LabeledDataset, m: int, alpha: float, seed: int,
                        max_redraws: int = 100) -> OwnerPartition:
    """Split ``dataset`` among ``m`` owners with Dirichlet label skew.

    Each class is divided among owners in proportions drawn from a symmetric
    Dirichlet with concentration ``alpha`` per owner; proportions become
    integer counts by largest-remainder rounding and the shuffled class
    indices are handed out contiguously. Large ``alpha`` gives every owner
    nearly the global label prior. Draws leaving an owner empty are repeated
    up to ``max_redraws`` times.
    """
    n = len(dataset)
    if m < 1:
        raise PartitionError("owner count must be positive")
    if m == 1:
        return OwnerPartition((np.arange(n),), n)
    if alpha <= 0:
        raise PartitionError("alpha must be positive")
    if n < m:
        raise PartitionError(f"{n} samples cannot give {m} owners one sample each")

    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(dataset.y == c) for c in range(dataset.num_classes)]
    for _ in range(max_redraws):
        chunks = [[] for _ in range(m)]
        for idx in by_class:
            if idx.size == 0:
                continue
            props = rng.dirichlet(np.full(m, float(alpha)))
            counts = largest_remainder(props * idx.size)
            perm = rng.permutation(idx)
            for owner, part in enumerate(np.split(perm, np.cumsum(counts)[:-1])):
                chunks[owner].append(part)
        sets = [np.concatenate(c) for c in chunks]
        if all(s.size > 0 for s in sets):
            return OwnerPartition(tuple(sets), n)
    raise PartitionError(f"no draw in {max_redraws} attempts left every owner nonempty")


def merge_partition(partition: OwnerPartition, dataset: LabeledDataset) -> list:
    """Per-owner views of ``dataset``, each in ascending index order."""
    if partition.dataset_size != len(dataset):
        raise IndexError("partition and dataset sizes differ")
    return [dataset.subset(s) for s in partition.index_sets]


def make_blobs(n: int, dim: int, num_classes: int, separation: float = 6.0,
               spread: float = 1.0, clusters_per_class: int = 1,
               cluster_radius: float = 0.0, seed: int = 0) -> LabeledDataset:
    """Gaussian-blob classification data.

    Class centres sit on scaled orthogonal axes so every pair is exactly
    ``separation * spread`` apart. With ``clusters_per_class > 1`` each class
    is a mixture of isotropic blobs whose centres are offset from the class
    centre by ``cluster_radius * spread`` in random directions. Labels are
    balanced and rows shuffled; features are float32-exact.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if dim < num_classes:
        raise ValueError("dim must be at least num_classes")
    if n < num_classes:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    centres = np.zeros((num_classes, dim))
    centres[np.arange(num_classes), np.arange(num_classes)] = separation * spread / np.sqrt(2)
    offsets = rng.standard_normal((num_classes, clusters_per_class, dim))
    offsets /= np.linalg.norm(offsets, axis=-1, keepdims=True)
    sub_centres = centres[:, None, :] + cluster_radius * spread * offsets
    if clusters_per_class == 1:
        sub_centres = centres[:, None, :]

    y = np.arange(n) % num_classes
    rng.shuffle(y)
    cluster = rng.integers(0, clusters_per_class, size=n)
    X = sub_centres[y, cluster] + spread * rng.standard_normal((n, dim))
    return LabeledDataset(X.astype(np.float32).astype(np.float64), y, num_classes)


def split_dataset(dataset: LabeledDataset, n_first: int, seed: int = 0):
    """Random split into two datasets of sizes ``n_first`` and the rest."""
    if not 0 < n_first < len(dataset):
        raise ValueError("split size out of range")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    return dataset.subset(np.sort(perm[:n_first])), dataset.subset(np.sort(perm[n_first:]))


# -- file formats ---------------------------------------------------------

def dataset_to_bytes(dataset: LabeledDataset) -> bytes:
    n, d = dataset.X.shape
    header = f"{DATASET_MAGIC} {DATASET_VERSION} d={d} C={dataset.num_classes} N={n}\n"
    return (header.encode("ascii")
            + dataset.X.astype("<f4").tobytes(order="C")
            + dataset.y.astype("<i4").tobytes())


def dataset_from_bytes(raw: bytes) -> LabeledDataset:
    nl = raw.index(b"\n")
    fields = raw[:nl].decode("ascii").split()
    if fields[0] != DATASET_MAGIC or int(fields[1]) != DATASET_VERSION:
        raise ValueError("not a dataset file")
    meta = dict(f.split("=") for f in fields[2:])
    d, C, n = int(meta["d"]), int(meta["C"]), int(meta["N"])
    body = raw[nl + 1:]
    if len(body) != 4 * n * d + 4 * n:
        raise ValueError("dataset body has wrong length")
    X = np.frombuffer(body, dtype="<f4", count=n * d).reshape(n, d)
    y = np.frombuffer(body, dtype="<i4", offset=4 * n * d, count=n)
    return LabeledDataset(X.astype(np.float64), y.astype(np.int64), C)


def save_dataset(dataset: LabeledDataset, path: PathLike) -> None:
    atomic_write_bytes(path, dataset_to_bytes(dataset))


def load_dataset(path: PathLike) -> LabeledDataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


def save_partition(partition: OwnerPartition, path: PathLike) -> None:
    atomic_write_text(path, json.dumps(partition.to_dict()) + "\n")


def load_partition(path: PathLike) -> OwnerPartition:
    with open(path) as fh:
        return OwnerPartition.from_dict(json.load(fh))


def save_events(events: Sequence[MisclassificationEvent], path: PathLike) -> None:
    atomic_write_text(path, json.dumps({"events": [e.to_dict() for e in events]}) + "\n")


def load_events(path: PathLike) -> list:
    with open(path) as fh:
        return [MisclassificationEvent.from_dict(e) for e in json.load(fh)["events"]]

