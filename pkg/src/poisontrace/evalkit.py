"""Ranking and detection metrics over per-owner responsibility scores."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from poisontrace._io import atomic_write_text
from poisontrace.core import LabeledDataset, MisclassificationEvent
from poisontrace.influence import rank_owners

DEFAULT_FPR = 1e-3


@dataclass(frozen=True)
class TrialResult:
    scores: np.ndarray
    malicious: np.ndarray
    attack: str = ""
    seed: int = 0
    malicious_count: Optional[int] = None

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        flags = np.asarray(self.malicious, dtype=bool)
        if scores.ndim != 1 or scores.shape != flags.shape:
            raise ValueError("need one score and one flag per owner")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "malicious", flags)
        if self.malicious_count is None:
            object.__setattr__(self, "malicious_count", int(flags.sum()))

    def positive_ranks(self) -> np.ndarray:
        """Sorted 1-based ranks of the malicious owners."""
        ranks = np.empty(self.scores.size, dtype=np.int64)
        ranks[rank_owners(self.scores)] = np.arange(1, self.scores.size + 1)
        return np.sort(ranks[self.malicious])

    def standardized(self) -> "TrialResult":
        """Scores z-normalised within the trial."""
        sd = self.scores.std()
        z = (self.scores - self.scores.mean()) / (sd if sd > 0 else 1.0)
        return TrialResult(z, self.malicious, self.attack, self.seed, self.malicious_count)


@dataclass(frozen=True)
class CalibrationSet:
    scores: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).ravel()
        if scores.size == 0:
            raise ValueError("calibration pool is empty")
        if not np.all(np.isfinite(scores)):
            raise ValueError("calibration scores must be finite")
        object.__setattr__(self, "scores", scores)

    @classmethod
    def from_trials(cls, trials: Sequence[TrialResult]) -> "CalibrationSet":
        if any(t.malicious.any() for t in trials):
            raise ValueError("calibration trials must not contain malicious owners")
        return cls(np.concatenate([t.scores for t in trials]))


def _require_positive(trial: TrialResult) -> None:
    if not trial.malicious.any():
        raise ValueError("trial has no malicious owner")


def average_precision(trial: TrialResult) -> float:
    _require_positive(trial)
    ranks = trial.positive_ranks()
    return float(np.mean(np.arange(1, ranks.size + 1) / ranks))


def reciprocal_rank(trial: TrialResult) -> float:
    _require_positive(trial)
    return 1.0 / float(trial.positive_ranks()[0])


def _nonempty(trials) -> list:
    trials = list(trials)
    if not trials:
        raise ValueError("no trials")
    return trials


def mean_ap(trials: Sequence[TrialResult]) -> float:
    return float(np.mean([average_precision(t) for t in _nonempty(trials)]))


def mean_rr(trials: Sequence[TrialResult]) -> float:
    return float(np.mean([reciprocal_rank(t) for t in _nonempty(trials)]))


def calibrate_threshold(cal: CalibrationSet, fpr: float = DEFAULT_FPR) -> float:
    """Smallest order statistic whose strict exceedance rate is at most ``fpr``.

    Owners are accused when ``score > threshold``. At most ``floor(fpr * n)``
    calibration scores lie strictly above the returned value.
    """
    if not 0 < fpr < 1:
        raise ValueError("fpr must lie in (0, 1)")
    desc = np.sort(cal.scores)[::-1]
    return float(desc[math.floor(fpr * desc.size)])


def empirical_fpr(scores, threshold: float) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    return float(np.mean(scores > threshold))


def _pooled(trials: Sequence[TrialResult]) -> tuple:
    trials = _nonempty(trials)
    return (np.concatenate([t.scores for t in trials]),
            np.concatenate([t.malicious for t in trials]))


def tpr_fpr(trials: Sequence[TrialResult], threshold: float) -> tuple:
    """Pooled true- and false-positive rates of ``score > threshold``.

    A rate is NaN when the pool has no owners of that class.
    """
    scores, flags = _pooled(trials)
    accused = scores > threshold
    pos, neg = flags.sum(), (~flags).sum()
    tpr = accused[flags].sum() / pos if pos else float("nan")
    fpr = accused[~flags].sum() / neg if neg else float("nan")
    return float(tpr), float(fpr)


def roc_curve(trials: Sequence[TrialResult]) -> np.ndarray:
    """``(FPR, TPR)`` points for every distinct threshold, from (0, 0) to (1, 1)."""
    scores, flags = _pooled(trials)
    if flags.all() or not flags.any():
        raise ValueError("ROC needs both malicious and benign owners")
    order = np.argsort(-scores, kind="stable")
    s, f = scores[order], flags[order]
    tp, fp = np.cumsum(f), np.cumsum(~f)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tpr = np.r_[0.0, tp[last] / f.sum()]
    fpr = np.r_[0.0, fp[last] / (~f).sum()]
    return np.column_stack([fpr, tpr])


def roc_auc(trials: Sequence[TrialResult]) -> tuple:
    """Area under the pooled ROC curve (ties count one half) and its points."""
    points = roc_curve(trials)
    auc = float(np.sum(np.diff(points[:, 0]) * (points[1:, 1] + points[:-1, 1]) / 2))
    return auc, points


def generate_benign_events(model, test: LabeledDataset, count: int, seed: int = 0,
                           exclude: Optional[LabeledDataset] = None) -> list:
    """Naturally misclassified test samples, as events labelled with the prediction.

    ``exclude`` drops test rows that also occur (feature- and label-wise) in
    a training set.
    """
    pred = model.predict(test.X)
    wrong = np.flatnonzero(pred != test.y)
    if exclude is not None and wrong.size:
        seen = {(r.tobytes(), int(c)) for r, c in zip(exclude.X, exclude.y)}
        wrong = np.array([i for i in wrong if (test.X[i].tobytes(), int(test.y[i])) not in seen],
                         dtype=np.int64)
    if wrong.size == 0:
        raise ValueError("no benign misclassifications")
    if count > wrong.size:
        raise ValueError(f"only {wrong.size} benign misclassifications, {count} requested")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(wrong, size=count, replace=False))
    return [MisclassificationEvent(test.X[i], int(pred[i]), int(test.y[i])) for i in chosen]


# -- reports --------------------------------------------------------------

@dataclass
class MetricsRow:
    attack: str
    malicious_count: int
    trials: int
    mAP: float
    mRR: float
    TPR: float
    FPR: float
    AUC: float

    def as_list(self) -> list:
        return [self.attack, self.malicious_count, self.trials, self.mAP, self.mRR,
                self.TPR, self.FPR, self.AUC]


@dataclass
class MetricsReport:
    rows: list
    threshold: Optional[float]
    fpr_target: float
    standardized: bool
    roc: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    HEADER = ("attack", "malicious_count", "trials", "mAP", "mRR", "TPR", "FPR", "AUC")

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"# threshold {self.threshold} fpr_target {self.fpr_target} "
                  f"standardized {str(self.standardized).lower()}\n")
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(self.HEADER)
        for row in self.rows:
            w.writerow([v if isinstance(v, (str, int)) else f"{v:.4f}" for v in row.as_list()])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "fpr_target": self.fpr_target,
                "standardized": self.standardized,
                "rows": [dict(zip(self.HEADER, r.as_list())) for r in self.rows]}

    def roc_text(self) -> str:
        return "".join(f"{fp!r} {tp!r}\n" for fp, tp in self.roc.tolist())

    def save(self, path, roc_path=None) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2) + "\n")
        if roc_path is not None:
            atomic_write_text(roc_path, self.roc_text())


def _maybe_auc(trials) -> tuple:
    try:
        return roc_auc(trials)
    except ValueError:
        return float("nan"), np.zeros((0, 2))


def evaluate(trials: Sequence[TrialResult], calibration=None, fpr: float = DEFAULT_FPR,
             standardized: bool = False) -> MetricsReport:
    """One metric row per attack and malicious-owner count.

    ``calibration`` is a :class:`CalibrationSet` or a list of benign trials;
    benign trials are standardised along with the attack trials when
    ``standardized`` is set.
    """
    trials = _nonempty(trials)
    if standardized:
        trials = [t.standardized() for t in trials]
    if calibration is not None and not isinstance(calibration, CalibrationSet):
        benign = [t.standardized() if standardized else t for t in calibration]
        calibration = CalibrationSet.from_trials(benign)
    threshold = calibrate_threshold(calibration, fpr) if calibration is not None else None
    groups: dict = {}
    for t in trials:
        groups.setdefault((t.attack, t.malicious_count), []).append(t)
    rows = []
    for (attack, count), group in sorted(groups.items()):
        rows.append(_row(attack, count, group, threshold))
    _, roc = _maybe_auc(trials)
    return MetricsReport(rows, threshold, fpr, standardized, roc)


def _row(attack: str, count: int, group: list, threshold: Optional[float]) -> MetricsRow:
    tpr, fp = tpr_fpr(group, threshold) if threshold is not None else (float("nan"),) * 2
    auc, _ = _maybe_auc(group)
    return MetricsRow(attack, count, len(group), mean_ap(group), mean_rr(group), tpr, fp, auc)
