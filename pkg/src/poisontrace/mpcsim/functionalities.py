"""Ideal functionalities over shared fixed-point values, with cost accounting.

Every functionality reconstructs its inputs, computes the exact result on
the ring integers, and hands back fresh shares. Invocation counters are per
output element; modeled rounds are charged once per call (elements of one
call run in parallel) and modeled bytes per element, both from a cost table.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from poisontrace.mpcsim.ring import FxShare, Ring, ScaleError, reconstruct_raw, share
from poisontrace.core import Sample
from poisontrace.trainer import ModelParams, final_layer_gradient

COUNTERS = ("mul", "fp_mul", "trunc", "rsqrt", "dotp", "sort", "gradient")

# Rounds per call and ring elements sent per party per output element.
# Sort is charged per key bit: rounds scale with K only, bytes with rows x cols.
DEFAULT_COST_TABLE = {
    "mul": {"rounds": 1, "elements": 1},
    "fp_mul": {"rounds": 2, "elements": 2},
    "trunc": {"rounds": 1, "elements": 1},
    "dotp": {"rounds": 2, "elements": 2},
    "rsqrt": {"rounds": 24, "elements": 24},
    "gradient": {"rounds": 40, "elements": 64},
    "sort": {"rounds_per_bit": 2, "elements_per_cell_per_bit": 2},
}

RSQRT_ITERATIONS = 3
# Linear minimax initial guess for 1/sqrt(m) on [1/4, 1): max relative error ~0.086.
RSQRT_C0 = 2.1328
RSQRT_C1 = 1.2187


def load_cost_table(path) -> dict:
    with open(path) as fh:
        table = json.load(fh)
    missing = set(DEFAULT_COST_TABLE) - set(table)
    if missing:
        raise ValueError(f"cost table lacks entries for {sorted(missing)}")
    return table


@dataclass
class Transcript:
    counts: dict = field(default_factory=lambda: {c: 0 for c in COUNTERS})
    rounds: int = 0
    bytes: int = 0

    @property
    def truncations(self) -> int:
        """Truncations performed, including those inside fp-mul and dotp."""
        return self.counts["trunc"] + self.counts["fp_mul"] + self.counts["dotp"]

    def __add__(self, other: "Transcript") -> "Transcript":
        counts = {c: self.counts[c] + other.counts[c] for c in COUNTERS}
        return Transcript(counts, self.rounds + other.rounds, self.bytes + other.bytes)

    @staticmethod
    def merge(transcripts: Sequence["Transcript"]) -> "Transcript":
        out = Transcript()
        for t in transcripts:
            out = out + t
        return out

    def to_dict(self, **params) -> dict:
        return {"counts": dict(self.counts), "truncations_total": self.truncations,
                "rounds": self.rounds, "bytes": self.bytes, "params": params}

    def to_text(self, **params) -> str:
        lines = [f"{c} {self.counts[c]}" for c in COUNTERS]
        lines += [f"truncations_total {self.truncations}", f"rounds {self.rounds}",
                  f"bytes {self.bytes}"]
        lines += [f"param.{k} {v}" for k, v in sorted(params.items())]
        return "\n".join(lines) + "\n"


@dataclass(eq=False)
class SortMatrix:
    """Key column plus payload blocks sharing its row order.

    Payload blocks may carry different scales, so they are kept as separate
    shared arrays of shape ``(rows, cols_j)``.
    """

    key: FxShare
    payload: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.key.shape) != 1:
            raise ValueError("sort key must be a column")
        for block in self.payload:
            if len(block.shape) != 2 or block.shape[0] != self.rows:
                raise ValueError("ragged sort matrix")

    @property
    def rows(self) -> int:
        return self.key.shape[0]

    @property
    def cols(self) -> int:
        return 1 + sum(b.shape[1] for b in self.payload)

    def head(self, n: int) -> "SortMatrix":
        return SortMatrix(self.key[:n], [b[:n] for b in self.payload])


class Simulator:
    """A single scheduler driving ``parties`` simulated parties in lockstep."""

    def __init__(self, ring: Ring = Ring(), parties: int = 3, seed=0,
                 cost_table: Optional[dict] = None):
        if parties < 2:
            raise ValueError("at least two parties are required")
        self.ring = ring
        self.parties = parties
        self.rng = np.random.default_rng(seed)
        self.cost_table = DEFAULT_COST_TABLE if cost_table is None else cost_table
        self.transcript = Transcript()

    def fork(self, seed) -> "Simulator":
        """Independent instance (own randomness and transcript), same setup."""
        return Simulator(self.ring, self.parties, seed, self.cost_table)

    # -- plumbing ---------------------------------------------------------
    def share(self, value, scale: int = 1) -> FxShare:
        return share(value, self.parties, self.rng, self.ring, scale)

    def _reshare(self, signed: np.ndarray, scale: int) -> FxShare:
        return share(self.ring.from_signed(signed), self.parties, self.rng, self.ring,
                     scale, encoded=True)

    def _open(self, x: FxShare) -> np.ndarray:
        return self.ring.to_signed(reconstruct_raw(x))

    def _charge(self, op: str, elements: int) -> None:
        cost = self.cost_table[op]
        self.transcript.counts[op] += elements
        self.transcript.rounds += cost["rounds"]
        self.transcript.bytes += cost["elements"] * elements * self.parties * self.ring.K // 8

    def _checked_product(self, a: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
        self.ring.check_range(a.astype(np.float64) * b.astype(np.float64), what)
        return a * b

    # -- functionalities --------------------------------------------------
    def f_mul(self, a: FxShare, b: FxShare) -> FxShare:
        """Untruncated product; scales add."""
        scale = a.scale + b.scale
        if scale > 2:
            raise ScaleError("product would exceed double scale")
        ra, rb = np.broadcast_arrays(self._open(a), self._open(b))
        out = self._checked_product(ra, rb, "product")
        self._charge("mul", out.size)
        return self._reshare(out, scale)

    def _shift(self, v: np.ndarray) -> np.ndarray:
        return v >> self.ring.f

    def f_trunc(self, x: FxShare) -> FxShare:
        """Drop ``f`` fractional bits (arithmetic shift); lowers the scale by one."""
        if x.scale < 1:
            raise ScaleError("cannot truncate an integer-scale value")
        self._charge("trunc", x.size)
        return self._reshare(self._shift(self._open(x)), x.scale - 1)

    def f_fp_mul(self, a: FxShare, b: FxShare) -> FxShare:
        if a.scale != 1 or b.scale != 1:
            raise ScaleError("fixed-point multiplication expects scale 2^f operands")
        ra, rb = np.broadcast_arrays(self._open(a), self._open(b))
        out = self._shift(self._checked_product(ra, rb, "fixed-point product"))
        self._charge("fp_mul", out.size)
        return self._reshare(out, 1)

    def f_dotp(self, u: FxShare, v: FxShare) -> FxShare:
        """Inner products along the last axis with one truncation at the end."""
        if u.scale != 1 or v.scale != 1:
            raise ScaleError("dot product expects scale 2^f operands")
        ru, rv = np.broadcast_arrays(self._open(u), self._open(v))
        fu, fv = ru.astype(np.float64), rv.astype(np.float64)
        self.ring.check_range(np.abs(fu * fv).sum(axis=-1), "dot product")
        out = self._shift((ru * rv).sum(axis=-1))
        self._charge("dotp", out.size)
        return self._reshare(out, 1)

    def f_fp_rsqrt(self, x: FxShare) -> FxShare:
        if x.scale != 1:
            raise ScaleError("rsqrt expects a scale 2^f operand")
        rx = self._open(x)
        if np.any(rx <= 0):
            raise ValueError("rsqrt input must be positive")
        out = rsqrt_kernel(rx, self.ring.f)
        self._charge("rsqrt", out.size)
        return self._reshare(out, 1)

    def f_sort(self, m: SortMatrix) -> SortMatrix:
        """Stable sort of all rows by descending key."""
        key = self._open(m.key)
        order = np.argsort(-key, kind="stable")
        cost = self.cost_table["sort"]
        self.transcript.counts["sort"] += 1
        self.transcript.rounds += cost["rounds_per_bit"] * self.ring.K
        self.transcript.bytes += (cost["elements_per_cell_per_bit"] * m.rows * m.cols
                                  * self.parties * self.ring.K * self.ring.K // 8)
        key_out = self._reshare(key[order], m.key.scale)
        payload = [self._reshare(self._open(b)[order], b.scale) for b in m.payload]
        return SortMatrix(key_out, payload)

    def f_gradient(self, G: FxShare, params: FxShare, shapes, x: FxShare,
                   y: int, layers: int = 1, scale: float = 1.0) -> FxShare:
        """Projected final-layer gradient of ``(x, y)`` from shared parameters.

        ``params`` holds the flattened model. Inputs are the fixed-point values
        held in shares; the result, times a public ``scale``, is encoded at
        scale 2^f.
        """
        def dec(s):
            return self.ring.decode(reconstruct_raw(s), s.scale)

        model = ModelParams.unflatten(dec(params), shapes)
        grad = final_layer_gradient(model, Sample(dec(x), int(y)), layers)
        out = dec(G) @ grad * scale
        self._charge("gradient", 1)
        enc = np.rint(out * 2.0 ** self.ring.f)
        self.ring.check_range(enc, "gradient sketch")
        return self._reshare(enc.astype(np.int64), 1)

    # -- local operations -------------------------------------------------
    def weighted_sum(self, x: FxShare, coeffs) -> FxShare:
        """``sum_t c_t x[t]`` for public reals ``c``, truncated once."""
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if x.shape[0] != coeffs.size:
            raise ValueError("one coefficient per leading entry is required")
        c = coeffs.reshape((-1,) + (1,) * (len(x.shape) - 1))
        self.ring.check_range(np.abs(self._open(x).astype(np.float64) * c).sum(axis=0)
                              * 2.0 ** self.ring.f, "weighted sum")
        return self.f_trunc(x.mul_public(np.broadcast_to(c, x.shape)).sum(axis=0))


def rsqrt_kernel(x: np.ndarray, f: int, iterations: int = RSQRT_ITERATIONS) -> np.ndarray:
    """Fixed-point ``1/sqrt`` of positive integers ``x`` encoded at scale 2^f.

    The input is normalised to ``m = x / 4^e`` with ``m`` in ``[1/4, 1)`` using
    its bit length, a linear guess is refined by Newton steps
    ``y <- y (3 - m y^2) / 2``, and the result is rescaled by ``2^-e`` with
    rounding.
    """
    x = np.asarray(x, dtype=np.int64)
    bits = np.frexp(x.astype(np.float64))[1].astype(np.int64)
    e = -((f - bits) // 2)
    shift = 2 * e
    m = np.where(shift >= 0, x >> np.maximum(shift, 0), x << np.maximum(-shift, 0))
    one = np.int64(1) << f
    y = np.int64(round(RSQRT_C0 * 2 ** f)) - ((np.int64(round(RSQRT_C1 * 2 ** f)) * m) >> f)
    for _ in range(iterations):
        y2 = (y * y) >> f
        my2 = (m * y2) >> f
        y = (y * (3 * one - my2)) >> (f + 1)
    # Round to nearest on the way down: small outputs keep few bits, and a
    # floor would bias every large-norm cosine low.
    half = np.where(e > 0, np.int64(1) << np.maximum(e - 1, 0), 0)
    return np.where(e >= 0, (y + half) >> np.maximum(e, 0), y << np.maximum(-e, 0))
