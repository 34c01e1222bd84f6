"""Gradient-similarity responsibility scores for data owners.

Sketch arrays follow one convention throughout: a single sample's sketches
are ``(|T|, r)``, a set of samples is ``(|T|, n, r)``, and ``rates`` holds
the learning rate of each checkpoint.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from poisontrace._io import atomic_write_text
from poisontrace.core import MisclassificationEvent, OwnerPartition

EPS = 1e-12
REPORT_FORMAT = "poisontrace-report"
REPORT_VERSION = 1


def _cosines(train: np.ndarray, event: np.ndarray) -> np.ndarray:
    """Cosine per checkpoint; zero-norm vectors give a zero term."""
    dots = np.einsum("t...r,tr->t...", train, event)
    tn = np.maximum(np.linalg.norm(train, axis=-1), EPS)
    en = np.maximum(np.linalg.norm(event, axis=-1), EPS)
    en = en.reshape(en.shape + (1,) * (dots.ndim - 1))
    return dots / (tn * en)


def _weighted(terms: np.ndarray, rates: np.ndarray) -> np.ndarray:
    rates = np.asarray(rates, dtype=np.float64)
    if rates.shape[0] != terms.shape[0]:
        raise ValueError("one learning rate per checkpoint is required")
    return np.tensordot(rates, terms, axes=(0, 0))


def gas_score(train_sketches, event_sketches, rates) -> float:
    """Learning-rate-weighted sum of per-checkpoint gradient cosines."""
    train = np.asarray(train_sketches, dtype=np.float64)
    event = np.asarray(event_sketches, dtype=np.float64)
    if train.shape != event.shape:
        raise ValueError(f"sketch shapes differ: {train.shape} vs {event.shape}")
    return float(_weighted(_cosines(train[:, None, :], event)[:, 0], rates))


def gas_scores(sketches, event_sketches, rates) -> np.ndarray:
    """:func:`gas_score` for every sample of a ``(|T|, n, r)`` stack."""
    sketches = np.asarray(sketches, dtype=np.float64)
    return _weighted(_cosines(sketches, np.asarray(event_sketches, dtype=np.float64)), rates)


def heuristic_rank(sketches, event_sketches, rates) -> np.ndarray:
    """Un-normalised inner-product scores used to pre-select candidates."""
    sketches = np.asarray(sketches, dtype=np.float64)
    dots = np.einsum("tnr,tr->tn", sketches, np.asarray(event_sketches, dtype=np.float64))
    return _weighted(dots, rates)


def user_score_mean(owner_sketches, event_sketches, rates) -> float:
    owner_sketches = np.asarray(owner_sketches)
    if owner_sketches.shape[1] == 0:
        raise ValueError("owner has no samples")
    return float(gas_scores(owner_sketches, event_sketches, rates).mean())


def user_score_pooled(owner_sketches, event_sketches, rates) -> float:
    """Cosine against the owner's summed (dataset-level) gradient sketch."""
    owner_sketches = np.asarray(owner_sketches, dtype=np.float64)
    if owner_sketches.shape[1] == 0:
        raise ValueError("owner has no samples")
    return gas_score(owner_sketches.sum(axis=1), event_sketches, rates)


@dataclass(frozen=True)
class SampleScoreSet:
    owner: int
    scores: np.ndarray


def top_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Positions of the ``k`` largest values; ties go to the lower position."""
    return np.argsort(-np.asarray(values), kind="stable")[:k]


def topk_aggregate(scores, k: int) -> float:
    """Mean of the ``k`` largest scores (of all scores if there are fewer)."""
    if isinstance(scores, SampleScoreSet):
        scores = scores.scores
    scores = np.asarray(scores, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if scores.size == 0:
        raise ValueError("empty score set")
    return float(scores[top_indices(scores, k)].mean())


def rank_owners(scores) -> np.ndarray:
    """Owner ids by descending score, ties by ascending id."""
    scores = np.asarray(scores)
    return np.lexsort((np.arange(scores.size), -scores))


@dataclass(eq=False)
class ResponsibilityReport:
    scores: np.ndarray
    ranking: np.ndarray
    params: dict = field(default_factory=dict)
    threshold: Optional[float] = None

    @classmethod
    def from_scores(cls, scores, **params) -> "ResponsibilityReport":
        scores = np.asarray(scores, dtype=np.float64)
        return cls(scores, rank_owners(scores), params)

    @property
    def owner_count(self) -> int:
        return self.scores.size

    @property
    def accused(self) -> list:
        if self.threshold is None:
            return []
        return [int(i) for i in self.ranking if self.scores[i] > self.threshold]

    def with_threshold(self, threshold: float) -> "ResponsibilityReport":
        return ResponsibilityReport(self.scores, self.ranking, dict(self.params), float(threshold))

    def ranks(self) -> np.ndarray:
        """1-based rank of every owner."""
        out = np.empty(self.owner_count, dtype=np.int64)
        out[self.ranking] = np.arange(1, self.owner_count + 1)
        return out

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "params": self.params,
            "scores": [float(s) for s in self.scores],
            "ranking": [int(i) for i in self.ranking],
            "threshold": self.threshold,
            "accused": self.accused,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResponsibilityReport":
        if d.get("format") != REPORT_FORMAT:
            raise ValueError("not a responsibility report")
        return cls(np.asarray(d["scores"], dtype=np.float64),
                   np.asarray(d["ranking"], dtype=np.int64),
                   dict(d.get("params", {})), d.get("threshold"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["owner_id", "score", "rank", "accused"])
        accused = set(self.accused)
        ranks = self.ranks()
        for i in range(self.owner_count):
            w.writerow([i, repr(float(self.scores[i])), int(ranks[i]), int(i in accused)])
        return buf.getvalue()

    def save(self, path, csv_path=None) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2) + "\n")
        if csv_path is not None:
            atomic_write_text(csv_path, self.to_csv())


def load_report(path) -> ResponsibilityReport:
    with open(path) as fh:
        return ResponsibilityReport.from_dict(json.load(fh))


def score_owners(sketches, event_sketches, rates, index_sets: Sequence, k: int) -> np.ndarray:
    """Top-k mean GAS per owner from cached sketches."""
    per_sample = gas_scores(sketches, event_sketches, rates)
    return np.array([topk_aggregate(per_sample[np.asarray(idx)], k) for idx in index_sets])


def score_owners_heuristic(sketches, event_sketches, rates, index_sets: Sequence,
                           k: int, l: int) -> np.ndarray:
    """Top-(k, l) scores: pre-select ``l`` samples per owner by inner product.

    Owners with fewer than ``l`` samples keep all of them.
    """
    if l < k:
        raise ValueError(f"l={l} must be at least k={k}")
    sketches = np.asarray(sketches, dtype=np.float64)
    h = heuristic_rank(sketches, event_sketches, rates)
    out = []
    for idx in index_sets:
        idx = np.asarray(idx)
        keep = idx[top_indices(h[idx], l)]
        out.append(topk_aggregate(gas_scores(sketches[:, keep], event_sketches, rates), k))
    return np.array(out)


def _check_sizes(record, partition: OwnerPartition) -> None:
    if partition.dataset_size != record.num_samples:
        raise ValueError(f"record covers {record.num_samples} samples, "
                         f"partition {partition.dataset_size}")


def traceback(record, partition: OwnerPartition, event: MisclassificationEvent,
              k: int = 32) -> ResponsibilityReport:
    """Rank owners by responsibility for ``event`` using the cached record."""
    _check_sizes(record, partition)
    event_sk = record.event_sketches(event.as_sample())
    scores = score_owners(record.sketches, event_sk, record.rates, partition.index_sets, k)
    return ResponsibilityReport.from_scores(scores, method="grad", k=k)


def traceback_heuristic(record, partition: OwnerPartition, event: MisclassificationEvent,
                        k: int = 32, l: int = 512) -> ResponsibilityReport:
    _check_sizes(record, partition)
    event_sk = record.event_sketches(event.as_sample())
    scores = score_owners_heuristic(record.sketches, event_sk, record.rates,
                                    partition.index_sets, k, l)
    return ResponsibilityReport.from_scores(scores, method="grad-heuristic", k=k, l=l)
