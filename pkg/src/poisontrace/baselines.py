"""Unlearning-based responsibility scores and their analytical failure modes.

The approximate-unlearning baseline fine-tunes the trained model with the
unlearned owner's labels replaced by the uniform distribution, then scores
that owner by how much the loss on the attack event rises. The remaining
functions are exact oracles for the mixture-posterior analysis and for the
argmin behaviour of empirical risk minimisation over a finite model set.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from poisontrace.core import LabeledDataset, MisclassificationEvent, OwnerPartition
from poisontrace.influence import ResponsibilityReport
from poisontrace.trainer import DivergenceError, ModelParams, one_hot, sgd_step


@dataclass(frozen=True)
class UnlearnConfig:
    lr: float = 1e-2
    epochs: int = 5
    batch_size: int = 64
    momentum: float = 0.0
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("unlearning learning rate must be nonnegative")
        if self.epochs < 1:
            raise ValueError("unlearning needs at least one epoch")


def unlearning_targets(joint: LabeledDataset, owner_indices) -> np.ndarray:
    targets = one_hot(joint.y, joint.num_classes)
    targets[np.asarray(owner_indices, dtype=np.int64)] = 1.0 / joint.num_classes
    return targets


def approx_unlearn(model: ModelParams, owner_indices, joint: LabeledDataset,
                   config: UnlearnConfig) -> ModelParams:
    """Fine-tune on ``joint`` with the owner's rows pushed toward uniform labels.

    The mini-batch order depends only on ``config.seed``, so runs for
    different owners see identical batches.
    """
    owner_indices = np.asarray(owner_indices, dtype=np.int64)
    if owner_indices.size and (owner_indices.min() < 0 or owner_indices.max() >= len(joint)):
        raise IndexError("owner index outside the joint dataset")
    params = model.copy()
    targets = unlearning_targets(joint, owner_indices)
    velocity = [np.zeros_like(w) for w in params.layers()]
    rng = np.random.default_rng(config.seed)
    n = len(joint)
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            loss = sgd_step(params, velocity, joint.X[idx], targets[idx], config.lr,
                            config.momentum, config.weight_decay)
            if not math.isfinite(loss) or not params.is_finite():
                raise DivergenceError(f"unlearning diverged in epoch {epoch}")
    return params


def event_loss(params: ModelParams, event: MisclassificationEvent) -> float:
    return float(params.loss(event.x[None, :], np.array([event.y_atk]))[0])


def unlearning_scores(model: ModelParams, partition: OwnerPartition, joint: LabeledDataset,
                      event: MisclassificationEvent, config: UnlearnConfig,
                      workers: int = 1) -> ResponsibilityReport:
    """Loss increase on the event after unlearning each owner in turn."""
    if partition.dataset_size != len(joint):
        raise ValueError("partition does not match the joint dataset")
    base = event_loss(model, event)

    def one(idx):
        return event_loss(approx_unlearn(model, idx, joint, config), event) - base

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(one, partition.index_sets))
    else:
        scores = [one(idx) for idx in partition.index_sets]
    return ResponsibilityReport.from_scores(
        scores, method="unlearning", lr=config.lr, epochs=config.epochs,
        objective="uniform-label cross-entropy on owner rows, joint fine-tuning")


# -- mixture posteriors ---------------------------------------------------

@dataclass(frozen=True)
class MixtureSpec:
    """Mixture components evaluated at one query point ``x``.

    ``densities[i]`` is component ``i``'s marginal density at ``x``,
    ``posteriors[i]`` its label distribution given ``x``. For the two-component
    unlearning analysis, component 0 is clean, component 1 poisoned, and
    ``weights[0]`` is the clean mixing weight.
    """

    densities: np.ndarray
    posteriors: np.ndarray
    weights: np.ndarray
    beta: Optional[float] = None

    def __post_init__(self):
        d = np.asarray(self.densities, dtype=np.float64)
        post = np.atleast_2d(np.asarray(self.posteriors, dtype=np.float64))
        w = np.asarray(self.weights, dtype=np.float64)
        if not (d.shape == w.shape == (post.shape[0],)):
            raise ValueError("densities, weights and posteriors disagree on component count")
        if np.any(w <= 0) or not np.isclose(w.sum(), 1.0, atol=1e-12):
            raise ValueError("weights must be positive and sum to one")
        if np.any(d < 0) or np.any(post < 0) or not np.allclose(post.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("densities must be nonnegative and posteriors normalised")
        object.__setattr__(self, "densities", d)
        object.__setattr__(self, "posteriors", post)
        object.__setattr__(self, "weights", w)

    @property
    def num_classes(self) -> int:
        return self.posteriors.shape[1]


def mixture_weights_at(spec: MixtureSpec) -> np.ndarray:
    """Posterior component weights at the query point (Bayes' rule)."""
    joint = spec.weights * spec.densities
    total = joint.sum()
    if total <= 0:
        raise ValueError("every component density is zero at the query point")
    return joint / total


def mixture_posterior(spec: MixtureSpec, y: int) -> float:
    return float(mixture_weights_at(spec) @ spec.posteriors[:, y])


def _two_component(spec: MixtureSpec) -> tuple:
    if spec.posteriors.shape[0] != 2 or spec.beta is None:
        raise ValueError("unlearning analysis needs a clean/poison pair and beta")
    alpha = float(spec.weights[0])
    beta = float(spec.beta)
    if not 0 < beta < min(alpha, 1 - alpha):
        raise ValueError("beta must lie in (0, min(alpha, 1 - alpha))")
    return alpha, beta


def unlearned_posteriors(spec: MixtureSpec, y: int) -> tuple:
    """Label posteriors after unlearning a poisoned or a clean slice.

    Returns ``(nu_p, nu_c)``: unlearning a ``beta`` fraction of poisoned data
    versus the same fraction of clean data, where unlearned rows carry a
    uniform label distribution over ``C`` classes.
    """
    alpha, beta = _two_component(spec)
    C = spec.num_classes
    mc, mp = spec.densities
    pc, pp = spec.posteriors[0, y], spec.posteriors[1, y]
    denom = alpha * mc + (1 - alpha) * mp
    if denom <= 0:
        raise ValueError("mixture density is zero at the query point")
    nu_p = (alpha * mc * pc + beta / C * mp + (1 - alpha - beta) * mp * pp) / denom
    nu_c = ((alpha - beta) * mc * pc + beta / C * mc + (1 - alpha) * mp * pp) / denom
    return float(nu_p), float(nu_c)


def unlearned_posteriors_backdoor(spec: MixtureSpec, y: int) -> tuple:
    """Closed form of :func:`unlearned_posteriors` when the clean density is zero."""
    alpha, beta = _two_component(spec)
    if spec.densities[0] != 0:
        raise ValueError("backdoor form requires zero clean density at x")
    pp = spec.posteriors[1, y]
    return float(pp + beta / (1 - alpha) * (1 / spec.num_classes - pp)), float(pp)


def unlearned_mixtures(spec: MixtureSpec) -> tuple:
    """The two unlearned distributions as explicit three-component mixtures."""
    alpha, beta = _two_component(spec)
    C = spec.num_classes
    uniform = np.full(C, 1.0 / C)
    mc, mp = spec.densities
    pc, pp = spec.posteriors
    nu_p = MixtureSpec(np.array([mc, mp, mp]), np.stack([pc, uniform, pp]),
                       np.array([alpha, beta, 1 - alpha - beta]))
    nu_c = MixtureSpec(np.array([mc, mc, mp]), np.stack([pc, uniform, pp]),
                       np.array([alpha - beta, beta, 1 - alpha]))
    return nu_p, nu_c


# -- finite ERM -----------------------------------------------------------

@dataclass(frozen=True)
class FiniteERM:
    """Loss of every candidate model on the clean and the poisoned distribution."""

    loss_clean: np.ndarray
    loss_poison: np.ndarray

    def __post_init__(self):
        lc = np.asarray(self.loss_clean, dtype=np.float64)
        lp = np.asarray(self.loss_poison, dtype=np.float64)
        if lc.shape != lp.shape or lc.ndim != 1:
            raise ValueError("loss tables must be 1-D and equal length")
        if lc.size == 0:
            raise ValueError("parameter set is empty")
        if not (np.all(np.isfinite(lc)) and np.all(np.isfinite(lp))) or lc.min() < 0 or lp.min() < 0:
            raise ValueError("losses must be finite and nonnegative")
        object.__setattr__(self, "loss_clean", lc)
        object.__setattr__(self, "loss_poison", lp)

    @property
    def size(self) -> int:
        return self.loss_clean.size

    def clean_argmin(self) -> frozenset:
        return argmin_set(self.loss_clean)

    def poison_argmin(self) -> frozenset:
        return argmin_set(self.loss_poison)

    def shared_argmin(self) -> frozenset:
        return self.clean_argmin() & self.poison_argmin()


def argmin_set(values, rtol: float = 1e-12) -> frozenset:
    values = np.asarray(values, dtype=np.float64)
    best = values.min()
    tol = rtol * max(abs(best), 1.0)
    return frozenset(int(i) for i in np.flatnonzero(values <= best + tol))


def erm_brute_force(erm: FiniteERM, alpha: float) -> frozenset:
    """Exact minimisers of ``alpha * L_clean + (1 - alpha) * L_poison``."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    return argmin_set(alpha * erm.loss_clean + (1 - alpha) * erm.loss_poison)


def leave_one_out_argmin(dataset_losses, remove: Optional[int] = None) -> frozenset:
    """ERM minimisers over the union of equally sized datasets.

    ``dataset_losses[j, theta]`` is the mean loss of model ``theta`` on dataset
    ``j``; ``remove`` drops one dataset, as retraining without an owner would.
    """
    table = np.asarray(dataset_losses, dtype=np.float64)
    keep = np.ones(table.shape[0], dtype=bool)
    if remove is not None:
        keep[remove] = False
    if not keep.any():
        raise ValueError("no datasets left")
    return argmin_set(table[keep].mean(axis=0))


def true_unlearning_scores(dataset_losses, event_loss_table: Sequence[float]) -> np.ndarray:
    """Event-loss increase when each dataset is removed and the model retrained.

    Ties among minimisers are resolved pessimistically (largest event loss),
    so the score is unchanged exactly when the argmin set is.
    """
    table = np.asarray(dataset_losses, dtype=np.float64)
    ev = np.asarray(event_loss_table, dtype=np.float64)
    base = max(ev[i] for i in leave_one_out_argmin(table))
    return np.array([max(ev[i] for i in leave_one_out_argmin(table, j)) - base
                     for j in range(table.shape[0])])
