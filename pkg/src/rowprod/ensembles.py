"""Bounded random entry distributions and seeded sampling of factor matrices."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import FactorMatrix

__all__ = [
    "RNG_NAME",
    "RNG_VERSION",
    "EnsembleSpec",
    "seed_derive",
    "make_rng",
    "sample_factor",
    "sample_factors",
    "delta_of",
    "center_split",
    "center_split_variance",
    "center_split_variance_floor",
]

RNG_NAME = "numpy-philox4x64"
RNG_VERSION = 1
MEAN_TOLERANCE = 1e-15

VARIANTS = ("rademacher", "ternary_uniform", "centered_bernoulli", "raw_bernoulli", "finite_table")


def seed_derive(base: int, trial: int, stream_tag: str) -> int:
    """Derive a 64-bit seed from ``(base, trial, stream_tag)``.

    The seed is the little-endian integer value of the 8-byte BLAKE2b digest of
    ``pack("<QQ", base mod 2**64, trial mod 2**64) + stream_tag.encode("utf-8")``.
    """
    mask = (1 << 64) - 1
    payload = struct.pack("<QQ", int(base) & mask, int(trial) & mask) + stream_tag.encode("utf-8")
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=int(seed) & ((1 << 64) - 1)))


@dataclass(frozen=True)
class EnsembleSpec:
    variant: str
    p: float | None = None
    values: tuple[float, ...] | None = None
    probs: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown ensemble variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant in ("centered_bernoulli", "raw_bernoulli"):
            if self.p is None or not 0.0 < float(self.p) < 1.0:
                raise ValueError(f"{self.variant} needs p in (0, 1), got {self.p!r}")
        if self.variant == "finite_table":
            if self.values is None or self.probs is None:
                raise ValueError("finite_table needs values and probs")
            values = tuple(float(v) for v in self.values)
            probs = tuple(float(q) for q in self.probs)
            if len(values) != len(probs) or not values:
                raise ValueError("finite_table values and probs must be non-empty and equal length")
            if any(abs(v) > 1.0 for v in values):
                raise ValueError("finite_table support must lie in [-1, 1]")
            if any(q < 0 for q in probs) or not math.isclose(sum(probs), 1.0, abs_tol=1e-12):
                raise ValueError("finite_table probs must be non-negative and sum to 1")
            object.__setattr__(self, "values", values)
            object.__setattr__(self, "probs", probs)

    @classmethod
    def rademacher(cls):
        return cls("rademacher")

    @classmethod
    def ternary(cls):
        return cls("ternary_uniform")

    @property
    def centered(self) -> bool:
        if self.variant == "raw_bernoulli":
            return False
        if self.variant == "finite_table":
            return abs(self.mean) <= MEAN_TOLERANCE
        return True

    @property
    def mean(self) -> float:
        if self.variant == "raw_bernoulli":
            return float(self.p)
        if self.variant == "finite_table":
            return math.fsum(v * q for v, q in zip(self.values, self.probs))
        return 0.0

    @property
    def second_moment(self) -> float:
        if self.variant == "rademacher":
            return 1.0
        if self.variant == "ternary_uniform":
            return 2.0 / 3.0
        if self.variant == "centered_bernoulli":
            return self.p * (1.0 - self.p)
        if self.variant == "raw_bernoulli":
            return float(self.p)
        return math.fsum(v * v * q for v, q in zip(self.values, self.probs))

    @property
    def is_sign(self) -> bool:
        """True when every sample is +1 or -1."""
        return self.variant == "rademacher"

    def to_dict(self) -> dict:
        out = {"variant": self.variant}
        if self.p is not None:
            out["p"] = self.p
        if self.values is not None:
            out["values"] = list(self.values)
            out["probs"] = list(self.probs)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> "EnsembleSpec":
        values = obj.get("values")
        probs = obj.get("probs")
        return cls(
            variant=obj["variant"],
            p=obj.get("p"),
            values=None if values is None else tuple(values),
            probs=None if probs is None else tuple(probs),
        )

    @classmethod
    def from_json(cls, text: str) -> "EnsembleSpec":
        return cls.from_dict(json.loads(text))


def _draw(spec: EnsembleSpec, shape, rng: np.random.Generator) -> np.ndarray:
    v = spec.variant
    if v == "rademacher":
        return 2.0 * rng.integers(0, 2, size=shape).astype(np.float64) - 1.0
    if v == "ternary_uniform":
        return rng.integers(-1, 2, size=shape).astype(np.float64)
    if v == "raw_bernoulli":
        return (rng.random(size=shape) < spec.p).astype(np.float64)
    if v == "centered_bernoulli":
        return (rng.random(size=shape) < spec.p).astype(np.float64) - spec.p
    idx = rng.choice(len(spec.values), size=shape, p=np.asarray(spec.probs))
    return np.asarray(spec.values, dtype=np.float64)[idx]


def sample_factor(spec: EnsembleSpec, d: int, n: int, seed=None, *, rng=None) -> FactorMatrix:
    """Sample a ``d x n`` factor with i.i.d. entries.

    Pass either a 64-bit ``seed`` (typically from :func:`seed_derive`) or an
    existing generator ``rng``.
    """
    if d < 1 or n < 1:
        raise ValueError(f"dimensions must be positive, got d={d}, n={n}")
    if rng is None:
        if seed is None:
            raise ValueError("sample_factor needs a seed or a generator")
        rng = make_rng(seed)
    return FactorMatrix(_draw(spec, (d, n), rng))


def sample_factors(spec: EnsembleSpec, rows: Sequence[int] | int, n: int, K: int | None = None, *, seed) -> list[FactorMatrix]:
    """Sample ``K`` independent factors from one generator keyed by ``seed``.

    ``rows`` is either a single row count (with ``K``) or one count per factor.
    """
    if isinstance(rows, (int, np.integer)):
        if K is None:
            raise ValueError("K is required when rows is a single integer")
        rows = [int(rows)] * K
    rng = make_rng(seed)
    return [sample_factor(spec, d, n, rng=rng) for d in rows]


def delta_of(spec: EnsembleSpec) -> float:
    """Standard deviation of a centered ensemble (its exact delta)."""
    if not spec.centered:
        raise ValueError(f"delta is only defined for centered ensembles, got {spec.variant!r} with mean {spec.mean}")
    if spec.variant == "rademacher":
        return 1.0
    return math.sqrt(spec.second_moment)


def _check_probs(p, rows: int, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.size == 1:
        p = np.full(rows, p[0])
    if p.size != rows:
        raise ValueError(f"{name} has {p.size} entries, expected {rows}")
    if np.any(p <= 0) or np.any(p >= 1):
        raise ValueError(f"{name} entries must lie in (0, 1)")
    return p


def center_split(rows_a, rows_b, p_a, p_b) -> FactorMatrix:
    """Combine two independent Bernoulli samples into a centered bounded factor.

    Entry ``(i, j)`` is ``p_b[i] * a[i, j] - p_a[i] * b[i, j]`` where row ``i`` of
    ``a`` is Bernoulli(``p_a[i]``) and row ``i`` of ``b`` is Bernoulli(``p_b[i]``).
    """
    a = np.asarray(rows_a, dtype=np.float64)
    b = np.asarray(rows_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    pa = _check_probs(p_a, a.shape[0], "p_a")
    pb = _check_probs(p_b, a.shape[0], "p_b")
    return FactorMatrix(pb[:, None] * a - pa[:, None] * b)


def center_split_variance(p_a, p_b):
    p_a = np.asarray(p_a, dtype=np.float64)
    p_b = np.asarray(p_b, dtype=np.float64)
    return p_b**2 * p_a * (1 - p_a) + p_a**2 * p_b * (1 - p_b)


def center_split_variance_floor(lo: float, hi: float) -> float:
    """Minimum of :func:`center_split_variance` over ``[lo, hi]^2``.

    The variance is a polynomial, so the minimum sits at a corner, at an edge
    critical point ``p_b = p_a / (4 p_a - 2)``, or at the interior critical
    point ``(3/4, 3/4)``.
    """
    if not 0.0 < lo <= hi < 1.0:
        raise ValueError(f"need 0 < lo <= hi < 1, got [{lo}, {hi}]")
    candidates = [(a, b) for a in (lo, hi) for b in (lo, hi)]
    for fixed in (lo, hi):
        if abs(4 * fixed - 2) > 1e-15:
            crit = fixed / (4 * fixed - 2)
            if lo <= crit <= hi:
                candidates += [(fixed, crit), (crit, fixed)]
    if lo <= 0.75 <= hi:
        candidates.append((0.75, 0.75))
    return float(min(center_split_variance(a, b) for a, b in candidates))
