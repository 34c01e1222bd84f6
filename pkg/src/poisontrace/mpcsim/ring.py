"""Additive secret sharing of fixed-point values over the ring Z_{2^K}.

Ring elements live in ``uint64`` arrays, so ``K <= 64``; arithmetic wraps
natively and is masked down for smaller rings. A real ``x`` is encoded as
``round(x * 2^(s*f))`` where the scale exponent ``s`` is 1 for ordinary
values and 2 for untruncated products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ScaleError(ValueError):
    """Raised when values of different fixed-point scales are combined."""


class FixedPointOverflow(ArithmeticError):
    """Raised when a value leaves the representable signed range."""


@dataclass(frozen=True)
class Ring:
    K: int = 64
    f: int = 16

    def __post_init__(self):
        if not 2 <= self.K <= 64:
            raise ValueError("ring size must be between 2 and 64 bits")
        if not 0 < self.f or 2 * self.f >= self.K - 1:
            raise ValueError("need 0 < f and 2f < K - 1 to hold double-scale products")

    @property
    def mask(self) -> np.uint64:
        return np.uint64((1 << self.K) - 1) if self.K < 64 else np.uint64(0xFFFFFFFFFFFFFFFF)

    @property
    def limit(self) -> float:
        """Exclusive bound on the magnitude of a signed ring element."""
        return float(2 ** (self.K - 1))

    def wrap(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.uint64)
        return a if self.K == 64 else a & self.mask

    def from_signed(self, v) -> np.ndarray:
        return self.wrap(np.asarray(v, dtype=np.int64).astype(np.uint64))

    def to_signed(self, a: np.ndarray) -> np.ndarray:
        a = self.wrap(a)
        if self.K < 64:
            sign = np.uint64(1 << (self.K - 1))
            a = np.where(a & sign, a | ~self.mask, a)
        return np.asarray(a, dtype=np.uint64).view(np.int64)

    def check_range(self, estimate, what: str) -> None:
        """Raise if a float estimate of signed ring values is out of range."""
        est = np.abs(np.asarray(estimate, dtype=np.float64))
        if est.size and (not np.all(np.isfinite(est)) or est.max() >= self.limit * 0.999):
            raise FixedPointOverflow(f"{what} exceeds the {self.K}-bit ring")

    def encode(self, x, scale: int = 1) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        v = np.rint(x * 2.0 ** (scale * self.f))
        self.check_range(v, "encoded value")
        return self.from_signed(v.astype(np.int64))

    def decode(self, a, scale: int = 1) -> np.ndarray:
        return self.to_signed(a).astype(np.float64) / 2.0 ** (scale * self.f)

    def random(self, rng: np.random.Generator, shape) -> np.ndarray:
        raw = rng.integers(0, np.iinfo(np.uint64).max, size=shape, dtype=np.uint64,
                           endpoint=True)
        return self.wrap(raw)


@dataclass(eq=False)
class FxShare:
    """Additive shares, one slice per party along axis 0."""

    shares: np.ndarray
    ring: Ring
    scale: int = 1

    def __post_init__(self):
        if self.shares.dtype != np.uint64 or self.shares.ndim < 1:
            raise TypeError("shares must be a uint64 array with a party axis")
        if self.shares.shape[0] < 2:
            raise ValueError("at least two parties are required")
        if self.scale not in (0, 1, 2):
            raise ScaleError(f"unsupported scale exponent {self.scale}")

    @property
    def parties(self) -> int:
        return self.shares.shape[0]

    @property
    def shape(self) -> tuple:
        return self.shares.shape[1:]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def _like(self, shares, scale=None) -> "FxShare":
        return FxShare(self.ring.wrap(shares), self.ring, self.scale if scale is None else scale)

    def _same_scale(self, other: "FxShare") -> None:
        if not isinstance(other, FxShare):
            raise TypeError("both operands must be shared values")
        if other.scale != self.scale:
            raise ScaleError(f"cannot combine scale 2^{self.scale}f with 2^{other.scale}f")
        if other.ring != self.ring or other.parties != self.parties:
            raise ValueError("operands use different rings or party counts")

    def __add__(self, other: "FxShare") -> "FxShare":
        self._same_scale(other)
        return self._like(self.shares + other.shares)

    def __sub__(self, other: "FxShare") -> "FxShare":
        self._same_scale(other)
        return self._like(self.shares - other.shares)

    def __neg__(self) -> "FxShare":
        return self._like(np.uint64(0) - self.shares)

    def __getitem__(self, key) -> "FxShare":
        if not isinstance(key, tuple):
            key = (key,)
        return self._like(self.shares[(slice(None),) + key])

    def sum(self, axis: int = -1) -> "FxShare":
        axis = axis + 1 if axis >= 0 else axis
        return self._like(self.shares.sum(axis=axis, dtype=np.uint64))

    def scale_by_int(self, c) -> "FxShare":
        """Multiply by public integers (local; scale unchanged)."""
        c = self.ring.from_signed(np.asarray(c, dtype=np.int64))
        return self._like(self.shares * c)

    def mul_public(self, c) -> "FxShare":
        """Multiply by public reals encoded at scale 2^f (local; raises the scale)."""
        if self.scale + 1 > 2:
            raise ScaleError("product would exceed double scale")
        return self._like(self.shares * self.ring.encode(c), self.scale + 1)

    def add_public(self, c) -> "FxShare":
        """Add a public constant at this value's scale; party 0 absorbs it."""
        out = self.shares.copy()
        out[0] = out[0] + self.ring.encode(np.broadcast_to(c, self.shape), self.scale)
        return self._like(out)

    def stack(self, others, axis: int = -1) -> "FxShare":
        for o in others:
            self._same_scale(o)
        axis = axis + 1 if axis >= 0 else axis
        return self._like(np.stack([self.shares] + [o.shares for o in others], axis=axis))


def share(value, n: int, rng: np.random.Generator, ring: Ring = Ring(), scale: int = 1,
          encoded: bool = False) -> FxShare:
    """Split ``value`` into ``n`` additive shares.

    ``value`` is a real array unless ``encoded`` is set, in which case it is
    taken to be ring elements already.
    """
    if n < 2:
        raise ValueError("at least two parties are required")
    enc = ring.wrap(value) if encoded else ring.encode(value, scale)
    enc = np.atleast_1d(enc) if np.ndim(enc) == 0 else enc
    rand = ring.random(rng, (n - 1,) + enc.shape)
    last = enc - rand.sum(axis=0, dtype=np.uint64)
    return FxShare(ring.wrap(np.concatenate([rand, last[None]], axis=0)), ring, scale)


def reconstruct_raw(x: FxShare) -> np.ndarray:
    """Encoded ring elements (as unsigned integers)."""
    return x.ring.wrap(x.shares.sum(axis=0, dtype=np.uint64))


def reconstruct(x: FxShare) -> np.ndarray:
    """Decoded real values."""
    return x.ring.decode(reconstruct_raw(x), x.scale)
