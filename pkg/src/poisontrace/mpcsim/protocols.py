"""Secure owner scoring: exact top-k traceback and the top-(k, l) variant.

Training sketches are shared fixed-point inputs taken from a training
record; the event sketch is produced inside the simulation by the gradient
functionality from shared checkpoint parameters and projections.

Training and event sketches are multiplied by public powers of two
(``grad_scale``, ``event_scale``) before encoding. Cosines are invariant to
both; :func:`suggest_scales` picks them so that the fixed-point error is
balanced across the range of sketch norms.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from poisontrace.core import MisclassificationEvent, OwnerPartition
from poisontrace.influence import ResponsibilityReport
from poisontrace.mpcsim.functionalities import Simulator, SortMatrix, Transcript
from poisontrace.mpcsim.ring import FxShare, Ring, reconstruct


@dataclass(frozen=True)
class MpcParams:
    K: int = 64
    f: int = 16
    parties: int = 3
    seed: int = 0
    grad_scale: float = 1.0
    event_scale: float = 1.0
    clip: float = 2.0 ** 12
    cost_table: Optional[dict] = field(default=None, compare=False)

    def __post_init__(self):
        Ring(self.K, self.f)
        if self.parties < 2:
            raise ValueError("at least two parties are required")
        if min(self.grad_scale, self.event_scale, self.clip) <= 0:
            raise ValueError("grad_scale, event_scale and clip must be positive")

    @property
    def ring(self) -> Ring:
        return Ring(self.K, self.f)

    def describe(self) -> dict:
        d = asdict(self)
        d.pop("cost_table")
        return d


@dataclass(eq=False)
class MpcResult:
    scores: np.ndarray
    transcript: Transcript
    owner_transcripts: list
    report: ResponsibilityReport


def _pow2_near(value: float) -> float:
    return float(2.0 ** round(math.log2(value)))


# Largest scaled norm product |g| |g_hat| admitted by the scale choice; its
# square at double scale stays below 2^(2 * 15 + 2f) = 2^62 for f = 16.
MAX_NORM_PRODUCT = 2.0 ** 15


def suggest_scales(record, event: MisclassificationEvent, f: int = 16,
                   quantile: float = 1.0) -> tuple:
    """Public powers of two for the training and event sketches.

    Cosines are computed from ``d = <g, g_hat>`` and ``N = |g|^2 |g_hat|^2``.
    With ``x = sqrt(N)``, truncating ``N`` to ``f`` bits costs a relative
    error of about ``2^-(f+1) / x^2`` and the reciprocal square root about
    ``2^-(f+1) x``. The event scale brings the median event norm to 1; the
    training scale then places the ``quantile`` and ``100 - quantile``
    percentiles of ``x`` so that both error terms are equal at the ends,
    subject to the largest ``x`` staying below ``MAX_NORM_PRODUCT * 2^(16-f)``.
    """
    event_norms = np.linalg.norm(record.event_sketches(event.as_sample()), axis=-1)
    event_scale = _pow2_near(1.0 / _positive_median(event_norms))
    norms = np.linalg.norm(np.asarray(record.sketches, dtype=np.float64), axis=-1)
    x = (norms * event_norms[:, None] * event_scale).ravel()
    x = x[x > 0]
    if x.size == 0:
        return 1.0, event_scale
    lo, hi = np.percentile(x, [quantile, 100.0 - quantile])
    c = min((lo * lo * hi) ** (-1.0 / 3.0), MAX_NORM_PRODUCT * 2.0 ** (16 - f) / x.max())
    return _pow2_near(c), event_scale


def _positive_median(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(np.median(values[values > 0])) if np.any(values > 0) else 1.0


def scaled_params(record, event: MisclassificationEvent, **kwargs) -> "MpcParams":
    grad_scale, event_scale = suggest_scales(record, event, kwargs.get("f", 16))
    return MpcParams(grad_scale=grad_scale, event_scale=event_scale, **kwargs)


class _Session:
    """Shared state of one traceback: event sketches and their squared norms."""

    def __init__(self, record, event: MisclassificationEvent, params: MpcParams):
        self.params = params
        self.sim = Simulator(params.ring, params.parties, [params.seed, 0], params.cost_table)
        self.rates = record.rates
        layers = record.config.gradient_layers
        parts = []
        for c in record.checkpoints:
            sh = self.sim.share
            g = self.sim.f_gradient(sh(c.projection), sh(c.params.flatten()), c.params.shapes(),
                                    sh(event.x), event.y_atk, layers, params.event_scale)
            parts.append(g)
        self.event = parts[0].stack(parts[1:], axis=0)
        self.event_sq = self.sim.f_dotp(self.event, self.event)
        self.sketches = np.clip(record.sketches * params.grad_scale, -params.clip, params.clip)

    def owner_sim(self, owner: int) -> Simulator:
        return self.sim.fork([self.params.seed, 1, owner])

    def owner_inputs(self, sim: Simulator, idx) -> FxShare:
        return sim.share(self.sketches[:, np.asarray(idx)])

    def norm_floor(self, sim: Simulator, N: FxShare) -> FxShare:
        # One unit in the last place keeps rsqrt defined for zero gradients.
        return N.add_public(2.0 ** -sim.ring.f)


def _topk_mean(sim: Simulator, h: FxShare, k: int) -> FxShare:
    ordered = sim.f_sort(SortMatrix(h))
    top = min(k, h.shape[0])
    return sim.f_trunc(ordered.key[:top].sum(axis=0).mul_public(1.0 / top))


def _expand(x: FxShare, axis: int) -> FxShare:
    return FxShare(np.expand_dims(x.shares, axis + 1 if axis >= 0 else axis), x.ring, x.scale)


def _check(record, partition: OwnerPartition, k: int) -> None:
    if partition.dataset_size != record.num_samples:
        raise ValueError(f"record covers {record.num_samples} samples, "
                         f"partition {partition.dataset_size}")
    if k < 1:
        raise ValueError("k must be >= 1")


def _finish(session: _Session, shares: list, transcripts: list, **report_params) -> MpcResult:
    scores = np.array([float(reconstruct(s)[0]) for s in shares])
    total = Transcript.merge([session.sim.transcript] + transcripts)
    report = ResponsibilityReport.from_scores(scores, **report_params,
                                              **session.params.describe())
    return MpcResult(scores, total, transcripts, report)


def protocol_traceback(record, partition: OwnerPartition, event: MisclassificationEvent,
                       k: int = 32, params: MpcParams = MpcParams()) -> MpcResult:
    """Top-k mean GAS per owner, one reciprocal square root per sample and checkpoint."""
    _check(record, partition, k)
    session = _Session(record, event, params)
    shares, transcripts = [], []
    for owner, idx in enumerate(partition.index_sets):
        sim = session.owner_sim(owner)
        g = session.owner_inputs(sim, idx)                  # (T, n, r)
        ev = _expand(session.event, 1)                      # (T, 1, r)
        d = sim.f_dotp(g, ev)                               # (T, n)
        A = sim.f_dotp(g, g)
        N = sim.f_fp_mul(A, _expand(session.event_sq, 1))
        h_t = sim.f_fp_mul(d, sim.f_fp_rsqrt(session.norm_floor(sim, N)))
        h = sim.weighted_sum(h_t, session.rates)            # (n,)
        shares.append(_topk_mean(sim, h, k))
        transcripts.append(sim.transcript)
    return _finish(session, shares, transcripts, method="mpc", k=k)


def protocol_traceback_heuristic(record, partition: OwnerPartition,
                                 event: MisclassificationEvent, k: int = 32, l: int = 512,
                                 params: MpcParams = MpcParams(),
                                 delayed_truncation: bool = True) -> MpcResult:
    """Top-(k, l) scoring with an oblivious sort by the inner-product heuristic.

    The sort matrix holds, per sample, the heuristic key, the per-checkpoint
    inner products, and the squared-norm products. With delayed truncation
    the latter stay at double scale until after the top-``l`` rows are kept.
    """
    if l < k:
        raise ValueError(f"l={l} must be at least k={k}")
    _check(record, partition, k)
    session = _Session(record, event, params)
    shares, transcripts = [], []
    for owner, idx in enumerate(partition.index_sets):
        sim = session.owner_sim(owner)
        g = session.owner_inputs(sim, idx)
        d = sim.f_dotp(g, _expand(session.event, 1))          # (T, n)
        A = sim.f_dotp(g, g)
        N2 = sim.f_mul(A, _expand(session.event_sq, 1))        # scale 2^2f
        # The key only orders rows, so it can stay at double scale.
        key = d.mul_public(np.broadcast_to(session.rates[:, None], d.shape)).sum(axis=0)
        norms = N2 if delayed_truncation else sim.f_trunc(N2)
        matrix = SortMatrix(key, [_transpose(d), _transpose(norms)])
        kept = sim.f_sort(matrix).head(l)
        d_top, n_top = kept.payload
        if delayed_truncation:
            n_top = sim.f_trunc(n_top)
        rs = sim.f_fp_rsqrt(session.norm_floor(sim, n_top))
        h_t = sim.f_fp_mul(d_top, rs)                           # (l, T)
        h = sim.weighted_sum(_transpose(h_t), session.rates)
        shares.append(_topk_mean(sim, h, k))
        transcripts.append(sim.transcript)
    return _finish(session, shares, transcripts, method="mpc-heuristic", k=k, l=l,
                   delayed_truncation=delayed_truncation)


def _transpose(x: FxShare) -> FxShare:
    return FxShare(np.ascontiguousarray(np.swapaxes(x.shares, 1, 2)), x.ring, x.scale)
