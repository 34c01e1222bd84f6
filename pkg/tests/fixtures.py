"""Seeded end-to-end experiment fixtures on synthetic blob data."""

from dataclasses import dataclass

import numpy as np

from poisontrace.attacks import (AttackSpec, distribute_poisons, make_trigger, run_attack,
                                 sample_derangement, successful_events)
from poisontrace.core import make_blobs, partition_dirichlet, split_dataset
from poisontrace.trainer import TrainConfig, train_with_checkpoints

TRACE_CONFIG = dict(epochs=10, lr=0.05, hidden=32, num_checkpoints=10, projection_dim=64)


@dataclass
class Trial:
    clean: object
    heldout: object
    outcome: object
    partition: object
    model: object
    record: object
    events: list


def blobs_split(seed, n_train=4000, n_test=1000, dim=20, num_classes=4, **kw):
    data = make_blobs(n_train + n_test, dim, num_classes, seed=seed, **kw)
    return split_dataset(data, n_train, seed=seed + 1)


def trigger_spec(train, seed, kind="trigger", poison_count=200, **kw):
    idx, values = make_trigger(train, 3, seed)
    rng = np.random.default_rng(seed)
    source, target = (int(c) for c in rng.choice(train.num_classes, 2, replace=False))
    return AttackSpec(kind=kind, poison_count=poison_count, source=source, target=target,
                      trigger_indices=idx, trigger_values=values, seed=seed, **kw)


def run_trial(seed, spec, n_malicious, train=None, heldout=None, owners=10, alpha=100.0,
              train_config=None):
    """Attack, split among owners, train with checkpoints, keep successful events."""
    if train is None:
        train, heldout = blobs_split(seed)
    outcome = run_attack(train, spec, heldout)
    part = partition_dirichlet(outcome.dataset, owners, alpha, seed)
    part = distribute_poisons(outcome, part, n_malicious, seed + n_malicious)
    cfg = TrainConfig(seed=seed, **(train_config or TRACE_CONFIG))
    model, record = train_with_checkpoints(outcome.dataset, cfg)
    return Trial(train, heldout, outcome, part, model, record,
                 successful_events(model, outcome.events))


def backdoor_trial(seed, n_malicious):
    train, heldout = blobs_split(seed)
    return run_trial(seed, trigger_spec(train, seed), n_malicious, train, heldout)


def noisy_permutation_trial(seed, n_malicious=1, noise_rate=0.8):
    train, heldout = blobs_split(seed)
    idx, values = make_trigger(train, 3, seed)
    spec = AttackSpec(kind="noisy-permutation-trigger", poison_count=200,
                      sigma=sample_derangement(train.num_classes, seed),
                      trigger_indices=idx, trigger_values=values, noise_rate=noise_rate,
                      seed=seed)
    return run_trial(seed, spec, n_malicious, train, heldout)


# Clustered blobs with a large held-out pool keep the nearest-neighbour
# subpopulation inside one cluster.
SUBPOP_SEED = 1
SUBPOP_DATA = dict(clusters_per_class=8, cluster_radius=12.0)
SUBPOP_HELDOUT = 4000
SUBPOP_POISONS = 100
SUBPOP_TRAIN = dict(epochs=30, lr=0.05, hidden=64, num_checkpoints=1, projection_dim=8)
