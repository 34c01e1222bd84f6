"""Poisoning attacks used to exercise traceback.

Each generator returns an :class:`AttackOutcome` holding the poisoned joint
dataset, the indices of the poisons inside it and a list of attack events
built from held-out data. Trigger attacks and label flips modify training
rows in place; the subpopulation attack appends relabelled bootstrap copies.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from poisontrace._io import atomic_write_text
from poisontrace.core import (LabeledDataset, MisclassificationEvent, OwnerPartition,
                              PartitionError, largest_remainder, save_dataset, save_events)

KINDS = ("trigger", "labelflip", "subpopulation", "noisy-trigger",
         "permutation-trigger", "noisy-permutation-trigger")


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    poison_count: int
    source: Optional[int] = None
    target: Optional[int] = None
    sigma: Optional[tuple] = None
    trigger_indices: tuple = ()
    trigger_values: tuple = ()
    noise_rate: float = 0.0
    population_size: int = 32
    pool_size: int = 32
    selection: str = "random"
    event_count: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise AttackError(f"unknown attack kind {self.kind!r}")
        if self.poison_count < 0:
            raise AttackError("poison_count must be nonnegative")
        if len(self.trigger_indices) != len(self.trigger_values):
            raise AttackError("trigger indices and values differ in length")
        if self.sigma is not None:
            object.__setattr__(self, "sigma", tuple(int(s) for s in self.sigma))
            check_derangement(self.sigma)
        if not 0.0 <= self.noise_rate <= 1.0:
            raise AttackError("noise_rate must lie in [0, 1]")
        object.__setattr__(self, "trigger_indices", tuple(int(i) for i in self.trigger_indices))
        object.__setattr__(self, "trigger_values", tuple(float(v) for v in self.trigger_values))

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("sigma", "trigger_indices", "trigger_values"):
            d[key] = None if d[key] is None else list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        d = dict(d)
        for key in ("trigger_indices", "trigger_values"):
            d[key] = tuple(d.get(key) or ())
        if d.get("sigma") is not None:
            d["sigma"] = tuple(d["sigma"])
        return cls(**d)


@dataclass(eq=False)
class AttackOutcome:
    dataset: LabeledDataset
    poison_indices: np.ndarray
    events: list
    spec: AttackSpec
    success_rate: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.poison_indices = np.sort(np.asarray(self.poison_indices, dtype=np.int64))
        if self.poison_indices.size and (self.poison_indices.min() < 0
                                         or self.poison_indices.max() >= len(self.dataset)):
            raise AttackError("poison index outside the dataset")

    def with_success_rate(self, params) -> "AttackOutcome":
        return replace(self, success_rate=attack_success_rate(params, self.events))

    def save(self, directory) -> None:
        directory = Path(directory)
        save_dataset(self.dataset, directory / "train.bin")
        save_events(self.events, directory / "events.json")
        atomic_write_text(directory / "attack.json", json.dumps({
            "spec": self.spec.to_dict(),
            "poison_indices": self.poison_indices.tolist(),
            "success_rate": self.success_rate,
            "meta": self.meta,
        }, indent=2) + "\n")


def attack_success_rate(params, events: Sequence[MisclassificationEvent]) -> float:
    """Fraction of events the model labels with their attack label."""
    if not events:
        raise AttackError("no attack events")
    X = np.stack([e.x for e in events])
    y = np.array([e.y_atk for e in events])
    return float(np.mean(params.predict(X) == y))


def successful_events(params, events: Sequence[MisclassificationEvent]) -> list:
    if not events:
        return []
    pred = params.predict(np.stack([e.x for e in events]))
    return [e for e, p in zip(events, pred) if p == e.y_atk]


def random_pair(num_classes: int, rng: np.random.Generator) -> tuple:
    source, target = rng.choice(num_classes, size=2, replace=False)
    return int(source), int(target)


def make_trigger(dataset: LabeledDataset, n_features: int, seed: int,
                 margin: float = 3.0) -> tuple:
    """Random feature subset with values beyond anything seen in ``dataset``.

    Each value is the feature's maximum plus ``margin`` standard deviations,
    so no clean row can carry the pattern.
    """
    if not 1 <= n_features <= dataset.dim:
        raise AttackError("trigger size out of range")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(dataset.dim, size=n_features, replace=False))
    col = dataset.X[:, idx]
    values = col.max(axis=0) + margin * np.maximum(col.std(axis=0), 1e-6)
    return tuple(int(i) for i in idx), tuple(float(np.float32(v)) for v in values)


def apply_trigger(X: np.ndarray, spec: AttackSpec) -> np.ndarray:
    if not spec.trigger_indices:
        raise AttackError("attack spec has no trigger")
    X = np.array(X, dtype=np.float64)
    idx = np.asarray(spec.trigger_indices)
    if idx.max() >= X.shape[-1]:
        raise AttackError("trigger index out of range")
    X[..., idx] = np.asarray(spec.trigger_values)
    return X


def has_trigger(X: np.ndarray, spec: AttackSpec) -> np.ndarray:
    idx = np.asarray(spec.trigger_indices)
    return np.all(np.atleast_2d(X)[:, idx] == np.asarray(spec.trigger_values), axis=1)


def _check_pair(spec: AttackSpec, num_classes: int) -> None:
    if spec.source is None or spec.target is None:
        raise AttackError("attack needs source and target labels")
    if spec.source == spec.target:
        raise AttackError("source and target must differ")
    if not (0 <= spec.source < num_classes and 0 <= spec.target < num_classes):
        raise AttackError("source/target outside the label range")


def _pick(pool: np.ndarray, count: int, rng: np.random.Generator, what: str) -> np.ndarray:
    if count > pool.size:
        raise AttackError(f"need {count} {what} samples, only {pool.size} available")
    return np.sort(rng.choice(pool, size=count, replace=False))


def _events(X: np.ndarray, y_atk, y_true) -> list:
    y_atk = np.broadcast_to(y_atk, (X.shape[0],))
    y_true = np.broadcast_to(y_true, (X.shape[0],))
    return [MisclassificationEvent(x, int(a), int(t)) for x, a, t in zip(X, y_atk, y_true)]


def make_trigger_backdoor(dataset: LabeledDataset, spec: AttackSpec,
                          heldout: LabeledDataset) -> AttackOutcome:
    """Stamp the trigger on source-class rows and relabel them to the target."""
    _check_pair(spec, dataset.num_classes)
    rng = np.random.default_rng(spec.seed)
    poisons = _pick(np.flatnonzero(dataset.y == spec.source), spec.poison_count, rng, "source")
    X, y = dataset.X.copy(), dataset.y.copy()
    X[poisons] = apply_trigger(X[poisons], spec)
    y[poisons] = spec.target

    src = np.flatnonzero(heldout.y == spec.source)
    ev = _pick(src, min(spec.event_count, src.size), rng, "held-out source")
    events = _events(apply_trigger(heldout.X[ev], spec), spec.target, spec.source)
    return AttackOutcome(dataset.with_rows(X, y), poisons, events, spec)


def make_label_flip(dataset: LabeledDataset, spec: AttackSpec,
                    heldout: LabeledDataset) -> AttackOutcome:
    """Relabel source-class rows to the target, leaving features untouched.

    ``selection="random"`` flips a uniform subset and uses held-out source
    rows as events. ``selection="boundary"`` flips the source rows reaching
    farthest toward the target class (largest projection onto the direction
    between the class means); events are then the held-out source rows in
    that same half-space.
    """
    _check_pair(spec, dataset.num_classes)
    rng = np.random.default_rng(spec.seed)
    src = np.flatnonzero(dataset.y == spec.source)
    hsrc = np.flatnonzero(heldout.y == spec.source)
    if spec.selection == "boundary":
        if spec.poison_count > src.size:
            raise AttackError(f"need {spec.poison_count} source samples, only {src.size} available")
        direction = (dataset.X[dataset.y == spec.target].mean(axis=0)
                     - dataset.X[src].mean(axis=0))
        proj = dataset.X[src] @ direction
        order = np.argsort(-proj, kind="stable")[:spec.poison_count]
        flips = np.sort(src[order])
        if flips.size:
            hsrc = hsrc[heldout.X[hsrc] @ direction >= proj[order[-1]]]
    elif spec.selection == "random":
        flips = _pick(src, spec.poison_count, rng, "source")
    else:
        raise AttackError(f"unknown selection {spec.selection!r}")
    y = dataset.y.copy()
    y[flips] = spec.target

    ev = _pick(hsrc, min(spec.event_count, hsrc.size), rng, "held-out source")
    events = _events(heldout.X[ev], spec.target, spec.source)
    return AttackOutcome(dataset.with_rows(dataset.X, y), flips, events, spec)


def make_subpopulation(dataset: LabeledDataset, spec: AttackSpec,
                       heldout: LabeledDataset) -> AttackOutcome:
    """Target the held-out neighbourhood of a random anchor point.

    The subpopulation is the ``population_size`` held-out points of the
    anchor's class nearest to it. Poisons are bootstrap draws from the
    ``pool_size`` training points nearest the subpopulation centroid,
    relabelled to the target and appended to the dataset.
    """
    if np.all(dataset.X.std(axis=0) == 0):
        raise AttackError("feature space is degenerate (zero variance)")
    if spec.population_size > len(heldout):
        raise AttackError("population larger than the held-out set")
    rng = np.random.default_rng(spec.seed)
    if spec.source is not None:
        anchor = int(rng.choice(np.flatnonzero(heldout.y == spec.source)))
    else:
        anchor = int(rng.integers(len(heldout)))
    label = int(heldout.y[anchor])
    target = spec.target
    if target is None:
        target = int(rng.choice([c for c in range(dataset.num_classes) if c != label]))
    if target == label:
        raise AttackError("target equals the subpopulation's label")

    same = np.flatnonzero(heldout.y == label)
    dist = np.linalg.norm(heldout.X[same] - heldout.X[anchor], axis=1)
    members = np.sort(same[np.argsort(dist, kind="stable")[:spec.population_size]])
    centroid = heldout.X[members].mean(axis=0)

    pool_dist = np.linalg.norm(dataset.X - centroid, axis=1)
    pool = np.argsort(pool_dist, kind="stable")[:spec.pool_size]
    draws = rng.choice(pool, size=spec.poison_count, replace=True)
    X = np.vstack([dataset.X, dataset.X[draws]])
    y = np.concatenate([dataset.y, np.full(draws.size, target)])
    poisons = np.arange(len(dataset), len(dataset) + draws.size)
    events = _events(heldout.X[members], target, label)
    spec = replace(spec, source=label, target=target)
    return AttackOutcome(dataset.with_rows(X, y), poisons, events, spec,
                         meta={"anchor": anchor, "members": members.tolist()})


def add_label_noise(outcome: AttackOutcome, noise_rate: float, seed: int) -> AttackOutcome:
    """Resample each poison's label uniformly with probability ``noise_rate``."""
    if not 0.0 <= noise_rate <= 1.0:
        raise AttackError("noise_rate must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    C = outcome.dataset.num_classes
    p = outcome.poison_indices
    hit = rng.random(p.size) < noise_rate
    fresh = rng.integers(0, C, size=p.size)
    y = outcome.dataset.y.copy()
    y[p[hit]] = fresh[hit]
    kind = outcome.spec.kind
    if not kind.startswith("noisy-") and kind in ("trigger", "permutation-trigger"):
        kind = "noisy-" + kind
    spec = replace(outcome.spec, kind=kind, noise_rate=noise_rate)
    return replace(outcome, dataset=outcome.dataset.with_rows(outcome.dataset.X, y), spec=spec)


def check_derangement(sigma: Sequence[int]) -> None:
    sigma = list(sigma)
    if sorted(sigma) != list(range(len(sigma))):
        raise AttackError("sigma is not a permutation")
    if any(s == i for i, s in enumerate(sigma)):
        raise AttackError("sigma has a fixed point")


def sample_derangement(num_classes: int, seed) -> tuple:
    if num_classes < 2:
        raise AttackError("no derangement of fewer than two classes")
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(num_classes)
        if np.all(perm != np.arange(num_classes)):
            return tuple(int(s) for s in perm)


def make_permutation_backdoor(dataset: LabeledDataset, spec: AttackSpec,
                              heldout: LabeledDataset) -> AttackOutcome:
    """Trigger backdoor sending every class ``i`` to ``sigma[i]``.

    Poisons and events are split as evenly as possible over the classes.
    """
    C = dataset.num_classes
    if spec.sigma is None:
        raise AttackError("permutation backdoor needs sigma")
    if len(spec.sigma) != C:
        raise AttackError("sigma must cover every class")
    sigma = np.asarray(spec.sigma)
    rng = np.random.default_rng(spec.seed)
    per_class = largest_remainder(np.full(C, spec.poison_count / C))
    per_event = largest_remainder(np.full(C, spec.event_count / C))
    X, y = dataset.X.copy(), dataset.y.copy()
    poisons, ev_x, ev_c = [], [], []
    for c in range(C):
        chosen = _pick(np.flatnonzero(dataset.y == c), int(per_class[c]), rng, f"class-{c}")
        poisons.append(chosen)
        held = np.flatnonzero(heldout.y == c)
        ev = _pick(held, min(int(per_event[c]), held.size), rng, f"held-out class-{c}")
        ev_x.append(heldout.X[ev])
        ev_c.append(np.full(ev.size, c))
    poisons = np.sort(np.concatenate(poisons))
    X[poisons] = apply_trigger(X[poisons], spec)
    y[poisons] = sigma[dataset.y[poisons]]
    ev_c = np.concatenate(ev_c)
    events = _events(apply_trigger(np.vstack(ev_x), spec), sigma[ev_c], ev_c)
    return AttackOutcome(dataset.with_rows(X, y), poisons, events, spec)


def run_attack(dataset: LabeledDataset, spec: AttackSpec, heldout: LabeledDataset) -> AttackOutcome:
    """Dispatch on ``spec.kind``; noisy kinds apply label noise afterwards."""
    kind = spec.kind
    base = kind.removeprefix("noisy-")
    base_spec = replace(spec, kind=base)
    if base == "trigger":
        out = make_trigger_backdoor(dataset, base_spec, heldout)
    elif base == "permutation-trigger":
        out = make_permutation_backdoor(dataset, base_spec, heldout)
    elif base == "labelflip":
        out = make_label_flip(dataset, spec, heldout)
    elif base == "subpopulation":
        out = make_subpopulation(dataset, spec, heldout)
    else:  # pragma: no cover - guarded by AttackSpec
        raise AttackError(kind)
    if kind.startswith("noisy-"):
        out = add_label_noise(out, spec.noise_rate, spec.seed + 1)
    return out


def distribute_poisons(outcome: AttackOutcome, partition: OwnerPartition, n_malicious: int,
                       seed: int) -> OwnerPartition:
    """Move every poison into one of ``n_malicious`` randomly chosen owners.

    Malicious owners are drawn uniformly; each poison then goes to a uniform
    random malicious owner, except that every malicious owner receives at
    least one poison. Clean rows are moved between owners so that every
    owner keeps its original size.
    """
    m = partition.owner_count
    if not 1 <= n_malicious <= m:
        raise PartitionError(f"n_malicious must lie in [1, {m}]")
    poisons = outcome.poison_indices
    if poisons.size < n_malicious:
        raise PartitionError("fewer poisons than malicious owners")
    if partition.dataset_size != len(outcome.dataset):
        raise PartitionError("partition does not match the poisoned dataset")
    rng = np.random.default_rng(seed)
    malicious = np.sort(rng.choice(m, size=n_malicious, replace=False))
    dest = np.empty(poisons.size, dtype=np.int64)
    order = rng.permutation(poisons.size)
    dest[order[:n_malicious]] = malicious
    dest[order[n_malicious:]] = rng.choice(malicious, size=poisons.size - n_malicious)

    sizes = partition.sizes()
    wanted = np.bincount(dest, minlength=m)
    if np.any(wanted > sizes):
        raise PartitionError("an owner cannot hold all the poisons assigned to it")

    is_poison = np.zeros(partition.dataset_size, dtype=bool)
    is_poison[poisons] = True
    # Owners keep a random subset of their own clean rows; surplus clean rows
    # are handed to owners that gave room to poisons.
    kept, surplus = [], []
    for o, idx in enumerate(partition.index_sets):
        clean = rng.permutation(idx[~is_poison[idx]])
        need = sizes[o] - wanted[o]
        kept.append(clean[:need])
        surplus.append(clean[need:])
    pool = rng.permutation(np.concatenate(surplus))
    sets, pos = [], 0
    for o in range(m):
        gap = sizes[o] - wanted[o] - kept[o].size
        sets.append(np.concatenate([kept[o], pool[pos:pos + gap], poisons[dest == o]]))
        pos += gap
    flags = tuple(bool(i in set(malicious.tolist())) for i in range(m))
    return OwnerPartition(tuple(sets), partition.dataset_size, flags)
