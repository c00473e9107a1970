"""Row products of matrices as implicit linear operators.

The row product of ``d_1 x n, ..., d_K x n`` matrices is the
``(d_1 ... d_K) x n`` matrix whose rows are entrywise products of one row
from each factor. Rows are ordered row-major over the multi-index
``(i_1, ..., i_K)`` with ``i_1`` varying slowest, so the flat (0-based) row of
``(i_1, ..., i_K)`` is ``np.ravel_multi_index((i_1, ..., i_K), (d_1, ..., d_K))``.
For two factors this means ``(A (x)_r B)[i * d_B + k] = A[i] * B[k]``, which
is also the ordering of ``np.kron``.
"""

from __future__ import annotations

import json
import math
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "Caps",
    "DEFAULT_CAPS",
    "CapExceededError",
    "get_caps",
    "caps_override",
    "FactorMatrix",
    "RowProductOperator",
    "flat_to_multi",
    "multi_to_flat",
    "row_entry",
    "materialize",
    "apply",
    "apply_adjoint",
    "gram",
    "iterated_log",
    "regime_check",
    "RegimeReport",
]

ENTRY_BOUND_SLACK = 1e-12


class CapExceededError(MemoryError):
    """Raised when an operation would exceed a configured size cap."""

    def __init__(self, what: str, required: int, allowed: int):
        self.what = what
        self.required = required
        self.allowed = allowed
        super().__init__(f"{what}: requires {required} entries, cap is {allowed}")


@dataclass(frozen=True)
class Caps:
    materialize_entries: int = 10**7
    gram_cols: int = 8192
    dense_eig_cols: int = 4096

    def replace(self, **overrides) -> "Caps":
        values = {k: v for k, v in overrides.items() if v is not None}
        return Caps(**{**self.__dict__, **values})


DEFAULT_CAPS = Caps()
_active_caps = DEFAULT_CAPS


def get_caps() -> Caps:
    return _active_caps


@contextmanager
def caps_override(caps: Caps | None = None, **overrides):
    """Temporarily replace the active caps (process-local)."""
    global _active_caps
    previous = _active_caps
    _active_caps = (caps or previous).replace(**overrides)
    try:
        yield _active_caps
    finally:
        _active_caps = previous


class FactorMatrix:
    """Dense real ``d x n`` matrix with entries bounded by 1 in absolute value.

    The data is copied on construction and exposed read-only.
    """

    __slots__ = ("_data",)

    def __init__(self, entries):
        data = np.array(entries, dtype=np.float64, copy=True)
        if data.ndim == 1:
            data = data.reshape(1, -1)
        if data.ndim != 2:
            raise ValueError(f"factor must be 2-dimensional, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"factor must have at least one row and column, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("factor entries must be finite")
        worst = float(np.max(np.abs(data)))
        if worst > 1.0 + ENTRY_BOUND_SLACK:
            raise ValueError(f"factor entries must satisfy |e| <= 1, found {worst!r}")
        data.setflags(write=False)
        self._data = data

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def rows(self) -> int:
        return self._data.shape[0]

    @property
    def cols(self) -> int:
        return self._data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._data.shape

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._data
        return self._data.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, FactorMatrix):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._data, other._data))

    def __hash__(self):
        return hash((self.shape, self._data.tobytes()))

    def __repr__(self):
        return f"FactorMatrix(rows={self.rows}, cols={self.cols})"

    # serialization ------------------------------------------------------

    BINARY_MAGIC = b"RPFM"
    FORMAT_VERSION = 1
    _HEADER = struct.Struct("<4sHQQ")

    def to_bytes(self) -> bytes:
        """Binary container: magic ``RPFM``, u16 version, u64 d, u64 n, then
        ``d * n`` little-endian f64 values in row-major order."""
        header = self._HEADER.pack(self.BINARY_MAGIC, self.FORMAT_VERSION, self.rows, self.cols)
        return header + self._data.astype("<f8").tobytes(order="C")

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FactorMatrix":
        size = cls._HEADER.size
        if len(blob) < size:
            raise ValueError("truncated factor container")
        magic, version, d, n = cls._HEADER.unpack(blob[:size])
        if magic != cls.BINARY_MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if version != cls.FORMAT_VERSION:
            raise ValueError(f"unsupported factor format version {version}")
        payload = blob[size:]
        if len(payload) != 8 * d * n:
            raise ValueError(f"payload holds {len(payload)} bytes, expected {8 * d * n}")
        return cls(np.frombuffer(payload, dtype="<f8").reshape(d, n))

    def to_json(self) -> str:
        return json.dumps(
            {
                "format": "rowprod.factor",
                "version": self.FORMAT_VERSION,
                "d": self.rows,
                "n": self.cols,
                "encoding": "f64-row-major",
                "entries": self._data.ravel().tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "FactorMatrix":
        obj = json.loads(text)
        if obj.get("format") != "rowprod.factor":
            raise ValueError("not a rowprod.factor document")
        if obj.get("version") != cls.FORMAT_VERSION:
            raise ValueError(f"unsupported factor format version {obj.get('version')}")
        if obj.get("encoding") != "f64-row-major":
            raise ValueError(f"unsupported encoding {obj.get('encoding')!r}")
        d, n = int(obj["d"]), int(obj["n"])
        entries = np.asarray(obj["entries"], dtype=np.float64)
        if entries.size != d * n:
            raise ValueError(f"entry count {entries.size} does not match {d}x{n}")
        return cls(entries.reshape(d, n))


def _as_factor(f) -> FactorMatrix:
    return f if isinstance(f, FactorMatrix) else FactorMatrix(f)


@dataclass(frozen=True)
class RowProductOperator:
    """Implicit ``N x n`` row product of ``K`` factors sharing ``n`` columns."""

    factors: tuple[FactorMatrix, ...]
    total_rows: int = field(init=False)

    def __init__(self, factors: Sequence):
        facs = tuple(_as_factor(f) for f in factors)
        if not facs:
            raise ValueError("a row product needs at least one factor")
        n = facs[0].cols
        for f in facs[1:]:
            if f.cols != n:
                raise ValueError(f"factors disagree on column count: {f.cols} != {n}")
        total = 1
        for f in facs:
            # python ints never overflow; the guard keeps N addressable by numpy
            total *= f.rows
        if total > np.iinfo(np.int64).max:
            raise OverflowError(f"row count {total} does not fit in int64")
        object.__setattr__(self, "factors", facs)
        object.__setattr__(self, "total_rows", total)

    @property
    def K(self) -> int:
        return len(self.factors)

    @property
    def n(self) -> int:
        return self.factors[0].cols

    @property
    def row_counts(self) -> tuple[int, ...]:
        return tuple(f.rows for f in self.factors)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.total_rows, self.n)

    def restrict_columns(self, cols) -> "RowProductOperator":
        cols = np.asarray(cols, dtype=np.intp)
        return RowProductOperator([f.data[:, cols] for f in self.factors])

    def squared(self) -> "RowProductOperator":
        """Row product of the entrywise-squared factors (entries of the result are squared)."""
        return RowProductOperator([f.data * f.data for f in self.factors])

    def __repr__(self):
        dims = "x".join(str(r) for r in self.row_counts)
        return f"RowProductOperator(K={self.K}, rows={dims}, n={self.n})"


def flat_to_multi(op: RowProductOperator, r: int) -> tuple[int, ...]:
    if not 0 <= r < op.total_rows:
        raise IndexError(f"row {r} out of range for {op.total_rows} rows")
    out = []
    for d in reversed(op.row_counts):
        r, i = divmod(r, d)
        out.append(i)
    return tuple(reversed(out))


def multi_to_flat(op: RowProductOperator, m: Sequence[int]) -> int:
    if len(m) != op.K:
        raise IndexError(f"multi-index has {len(m)} entries, operator has {op.K} factors")
    r = 0
    for i, d in zip(m, op.row_counts):
        if not 0 <= i < d:
            raise IndexError(f"index {i} out of range for factor with {d} rows")
        r = r * d + int(i)
    return r


def row_entry(op: RowProductOperator, m: Sequence[int], j: int) -> float:
    """Entry of the row product at multi-index ``m`` (0-based) and column ``j``."""
    if len(m) != op.K:
        raise IndexError(f"multi-index has {len(m)} entries, operator has {op.K} factors")
    if not 0 <= j < op.n:
        raise IndexError(f"column {j} out of range for {op.n} columns")
    value = 1.0
    for i, f in zip(m, op.factors):
        if not 0 <= i < f.rows:
            raise IndexError(f"index {i} out of range for factor with {f.rows} rows")
        value *= f.data[i, j]
    return float(value)


def materialize(op: RowProductOperator, cap: int | None = None) -> np.ndarray:
    cap = _active_caps.materialize_entries if cap is None else cap
    required = op.total_rows * op.n
    if required > cap:
        raise CapExceededError("materialize", required, cap)
    out = op.factors[0].data
    for f in op.factors[1:]:
        out = (out[:, None, :] * f.data[None, :, :]).reshape(-1, op.n)
    return np.array(out, copy=True)


def _prefix_product(factors: Sequence[FactorMatrix], x: np.ndarray) -> np.ndarray:
    """Rows of ``(F_1 (x)_r ... (x)_r F_m) diag(x)`` for a column-stacked ``x``.

    ``x`` has shape ``(n, r)``; the result has shape ``(d_1 ... d_m, n, r)``.
    """
    t = factors[0].data[:, :, None] * x[None, :, :]
    for f in factors[1:]:
        t = (t[:, None, :, :] * f.data[None, :, :, None]).reshape(-1, *x.shape)
    return t


def apply(op: RowProductOperator, x) -> np.ndarray:
    """Compute ``op @ x`` without forming the ``N x n`` matrix.

    ``x`` may be a vector of length ``n`` or an ``(n, r)`` array of columns.
    """
    x = np.asarray(x, dtype=np.float64)
    vector = x.ndim == 1
    if vector:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] != op.n:
        raise ValueError(f"expected leading dimension {op.n}, got shape {x.shape}")
    last = op.factors[-1].data
    if op.K == 1:
        y = last @ x
    else:
        t = _prefix_product(op.factors[:-1], x)  # (N / d_K, n, r)
        # y[p, k, r] = sum_j t[p, j, r] * last[k, j]
        y = np.einsum("pjr,kj->pkr", t, last, optimize=True).reshape(op.total_rows, x.shape[1])
    return y[:, 0] if vector else y


def apply_adjoint(op: RowProductOperator, y) -> np.ndarray:
    """Compute ``op.T @ y`` for a vector of length ``N`` or an ``(N, r)`` array."""
    y = np.asarray(y, dtype=np.float64)
    vector = y.ndim == 1
    if vector:
        y = y[:, None]
    if y.ndim != 2 or y.shape[0] != op.total_rows:
        raise ValueError(f"expected leading dimension {op.total_rows}, got shape {y.shape}")
    r = y.shape[1]
    last = op.factors[-1].data
    # z[p, j, r] = sum_k y[p, k, r] * last[k, j]
    z = np.einsum("pkr,kj->pjr", y.reshape(-1, last.shape[0], r), last, optimize=True)
    for f in reversed(op.factors[:-1]):
        z = np.einsum("pkjr,kj->pjr", z.reshape(-1, f.rows, op.n, r), f.data, optimize=True)
    out = z.reshape(op.n, r)
    return out[:, 0] if vector else out


def gram(op: RowProductOperator, cap: int | None = None) -> np.ndarray:
    """``M.T @ M`` for the materialized row product, via the entrywise
    product of the factor Gram matrices."""
    cap = _active_caps.gram_cols if cap is None else cap
    if op.n > cap:
        raise CapExceededError("gram", op.n, cap)
    g = None
    for f in op.factors:
        fg = f.data.T @ f.data
        g = fg if g is None else g * fg
    # symmetrize away any BLAS asymmetry
    return 0.5 * (g + g.T)


def iterated_log(q: int, t: float) -> float:
    if q < 1 or int(q) != q:
        raise ValueError(f"q must be a positive integer, got {q!r}")
    if not t > 0:
        raise ValueError(f"t must be positive, got {t!r}")
    value = float(t)
    for _ in range(int(q)):
        value = max(math.log(value), 1.0)
    return value


@dataclass(frozen=True)
class RegimeReport:
    holds: bool
    n: float
    bound: float
    d: float
    K: int
    q: int
    c: float

    def to_dict(self) -> dict:
        return dict(holds=self.holds, lhs=self.n, rhs=self.bound, d=self.d, K=self.K, q=self.q, c=self.c)


def regime_check(n, d, K, q, c) -> RegimeReport:
    """Whether ``n <= c d**K / log_(q) d`` holds."""
    bound = c * float(d) ** K / iterated_log(q, d)
    return RegimeReport(holds=n <= bound, n=n, bound=bound, d=d, K=K, q=q, c=c)
