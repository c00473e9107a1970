"""l1 and mixed-norm geometry of row products.

Covers block decompositions of vectors, the l1(l2) "Q" norm, a sphere
minimizer for ``||M x||_1``, l1/l2 equivalence checks, Levy concentration
estimates and the e_1 witness for tensor-sign images.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import binomtest

from .core import RowProductOperator, apply, apply_adjoint
from .ensembles import EnsembleSpec, make_rng, sample_factor

__all__ = [
    "BlockDecomposition",
    "block_decompose",
    "sample_flat_ball_point",
    "q_norm",
    "row_product_q_norm",
    "v_condition_audit",
    "ProbeResult",
    "l1_min_probe",
    "kashin_audit",
    "LevyEstimate",
    "levy_pair_bound",
    "levy_empirical",
    "volume_ratio_witness",
]


@dataclass
class BlockDecomposition:
    n: int
    l: int
    permutation: np.ndarray
    blocks: list[np.ndarray]

    def weighted_sum(self, x) -> float:
        """``sum_m |I_m| * max_{i in I_m} |x_i|^2``."""
        x = np.asarray(x, dtype=np.float64)
        return float(sum(len(b) * np.max(np.abs(x[b])) ** 2 for b in self.blocks))


def block_decompose(x, l: int) -> BlockDecomposition:
    """Split indices into blocks of sizes ``l, 4l, 16l, ...`` by decreasing ``|x|``.

    Ties in ``|x|`` keep the lower index first; the last block may be short.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("cannot decompose an empty vector")
    if l < 1:
        raise ValueError(f"block parameter must be >= 1, got {l}")
    perm = np.argsort(-np.abs(x), kind="stable")
    blocks = []
    start, size = 0, int(l)
    while start < x.size:
        blocks.append(perm[start : start + size])
        start += size
        size *= 4
    return BlockDecomposition(n=x.size, l=int(l), permutation=perm, blocks=blocks)


def sample_flat_ball_point(n: int, b: float, rng: np.random.Generator) -> np.ndarray:
    """Random point of ``B_2^n`` intersected with ``b B_inf^n``, biased toward
    saturated coordinates (``|x_i| = b``) so both constraints are exercised."""
    g = rng.standard_normal(n) * rng.uniform(0.1, 3.0) * b * math.sqrt(n)
    x = np.clip(g / math.sqrt(n), -b, b)
    norm = np.linalg.norm(x)
    if norm > 1.0:
        x /= norm
    return x


def q_norm(U) -> float:
    """Sum of the Euclidean norms of the rows of ``U``."""
    U = np.asarray(U, dtype=np.float64)
    if U.ndim == 1:
        U = U[None, :]
    return float(np.sum(np.linalg.norm(U, axis=1)))


def row_product_q_norm(op: RowProductOperator, x) -> float:
    """Q-norm of ``op (x)_r x^T`` (each row of ``op`` scaled entrywise by ``x``).

    Row ``i`` contributes ``sqrt(sum_j M[i,j]^2 x_j^2)``, which is the ``i``-th
    coordinate of the squared-entry row product applied to ``x**2``.
    """
    x = np.asarray(x, dtype=np.float64)
    sq = apply(op.squared(), x * x)
    return float(np.sum(np.sqrt(np.maximum(sq, 0.0))))


def _test_directions(n: int, rng: np.random.Generator, n_random: int) -> list[np.ndarray]:
    xs = []
    for _ in range(n_random):
        v = rng.standard_normal(n)
        xs.append(v / np.linalg.norm(v))
    for j in range(min(n, 8)):
        xs.append(np.eye(n)[j])
    for s in (2, 4, 8):
        if s <= n:
            v = np.zeros(n)
            v[rng.choice(n, size=s, replace=False)] = rng.choice([-1.0, 1.0], size=s)
            xs.append(v / np.linalg.norm(v))
    xs.append(np.ones(n) / math.sqrt(n))
    xs.append(rng.choice([-1.0, 1.0], size=n) / math.sqrt(n))
    return xs


def v_condition_audit(op: RowProductOperator, xs=None, seed: int = 0, n_random: int = 100) -> dict:
    """Minimum over test vectors of ``Q-norm(op (x)_r x^T) / (N ||x||_2)``.

    Without ``xs`` the test set mixes ``n_random`` random unit vectors with
    standard basis, sparse sign and flat vectors.
    """
    if xs is None:
        xs = _test_directions(op.n, make_rng(seed), n_random)
    ratios = []
    for x in xs:
        x = np.asarray(x, dtype=np.float64)
        nx = np.linalg.norm(x)
        if nx == 0:
            raise ValueError("test vectors must be nonzero")
        ratios.append(row_product_q_norm(op, x) / (op.total_rows * nx))
    i = int(np.argmin(ratios))
    return {"min_ratio": float(ratios[i]), "argmin": i, "count": len(ratios), "ratios": ratios}


# --------------------------------------------------------------------------
# sphere minimization of ||M x||_1


@dataclass
class ProbeResult:
    best_value: float
    best_point: np.ndarray
    restarts_used: int
    steps_per_restart: int
    restart_values: list[float]
    restart_points: np.ndarray = field(repr=False)
    trajectory: list[tuple[int, int, float]] | None = field(default=None, repr=False)

    def trajectory_csv(self) -> str:
        lines = ["restart,step,value"]
        for r, s, v in self.trajectory or []:
            lines.append(f"{r},{s},{v!r}")
        return "\n".join(lines) + "\n"


def _initial_points(n: int, restarts: int, rng: np.random.Generator) -> np.ndarray:
    """Columns cycle through random Gaussian, sparse and flat sign starts."""
    X = np.zeros((n, restarts))
    for r in range(restarts):
        kind = r % 3
        if kind == 0:
            v = rng.standard_normal(n)
        elif kind == 1:
            s = min(n, 1 + (r // 3) % 3)
            v = np.zeros(n)
            v[rng.choice(n, size=s, replace=False)] = rng.choice([-1.0, 1.0], size=s)
        else:
            v = rng.choice([-1.0, 1.0], size=n)
        X[:, r] = v / np.linalg.norm(v)
    return X


def l1_min_probe(
    op: RowProductOperator,
    restarts: int = 50,
    steps: int = 2000,
    step_schedule: tuple[float, float] = (1.0, 10.0),
    seed: int = 0,
    *,
    record_every: int | None = None,
) -> ProbeResult:
    """Upper bound on ``min_{|x|_2 = 1} ||op x||_1`` by projected subgradient descent.

    Each restart takes normalized steps of length ``a / (b + t)`` along the
    tangential part of ``op.T sign(op x)`` and renormalizes. All restarts run
    as one batch. The returned value is attained at ``best_point``, so it is a
    valid upper bound regardless of convergence.
    """
    if restarts < 1 or steps < 1:
        raise ValueError("restarts and steps must be >= 1")
    a, b = step_schedule
    rng = make_rng(seed)
    X = _initial_points(op.n, restarts, rng)
    best_vals = np.full(restarts, np.inf)
    best_X = X.copy()
    trajectory = [] if record_every else None
    for t in range(steps + 1):
        Y = apply(op, X)
        vals = np.abs(Y).sum(axis=0)
        improved = vals < best_vals
        best_vals[improved] = vals[improved]
        best_X[:, improved] = X[:, improved]
        if trajectory is not None and t % record_every == 0:
            trajectory.extend((r, t, float(vals[r])) for r in range(restarts))
        if t == steps:
            break
        G = apply_adjoint(op, np.sign(Y))
        G -= X * np.sum(X * G, axis=0)
        gn = np.linalg.norm(G, axis=0)
        moving = gn > 0
        G[:, moving] /= gn[moving]
        X = X - (a / (b + t)) * G
        X /= np.linalg.norm(X, axis=0)
    best_X /= np.linalg.norm(best_X, axis=0)
    finals = np.abs(apply(op, best_X)).sum(axis=0)
    r = int(np.argmin(finals))  # argmin takes the lowest index on ties
    return ProbeResult(
        best_value=float(finals[r]),
        best_point=best_X[:, r].copy(),
        restarts_used=restarts,
        steps_per_restart=steps,
        restart_values=[float(v) for v in finals],
        restart_points=best_X,
        trajectory=trajectory,
    )


def kashin_audit(op: RowProductOperator, n_random_images: int = 200, probe: ProbeResult | None = None, seed: int = 0) -> dict:
    """Check ``||y||_1 <= sqrt(N) ||y||_2`` on images ``y = op x`` and record the
    largest ``sqrt(N) ||y||_2 / ||y||_1``.

    Images come from ``n_random_images`` random unit ``x`` plus every restart
    point of ``probe`` when given. Zero images are counted but skipped.
    """
    rng = make_rng(seed)
    X = rng.standard_normal((op.n, n_random_images))
    X /= np.linalg.norm(X, axis=0)
    if probe is not None:
        X = np.hstack([X, probe.restart_points, probe.best_point[:, None]])
    Y = apply(op, X)
    root = math.sqrt(op.total_rows)
    l1 = np.abs(Y).sum(axis=0)
    l2 = np.linalg.norm(Y, axis=0)
    nonzero = l1 > 0
    cs_violations = int(np.sum(l1 > root * l2 * (1 + 1e-10)))
    ratios = root * l2[nonzero] / l1[nonzero]
    return {
        "images": int(Y.shape[1]),
        "zero_images": int(np.sum(~nonzero)),
        "cs_violations": cs_violations,
        "max_equivalence_ratio": float(ratios.max()) if ratios.size else math.nan,
        "ratios": ratios.tolist(),
    }


# --------------------------------------------------------------------------
# Levy concentration


@dataclass
class LevyEstimate:
    estimate: float
    frequency: float
    hits: int
    trials: int
    ci_low: float
    ci_high: float
    confidence: float = 0.95

    def to_dict(self) -> dict:
        return dict(
            estimate=self.estimate,
            frequency=self.frequency,
            hits=self.hits,
            trials=self.trials,
            ci_low=self.ci_low,
            ci_high=self.ci_high,
            confidence=self.confidence,
        )


def _wilson(hits: int, trials: int, confidence: float) -> tuple[float, float]:
    ci = binomtest(hits, trials).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


def levy_pair_bound(sampler: Callable[[np.random.Generator], np.ndarray], rho: float, trials: int, seed: int, confidence: float = 0.95) -> LevyEstimate:
    """Estimate ``sqrt(P(||X - X'||_1 <= 2 rho))`` from ``trials`` independent pairs.

    ``sampler(rng)`` must return one draw of ``X``. The confidence interval
    is a Wilson interval on the inner frequency, not on its square root.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if rho < 0:
        raise ValueError("rho must be non-negative")
    rng = make_rng(seed)
    hits = 0
    for _ in range(trials):
        x1 = np.asarray(sampler(rng), dtype=np.float64)
        x2 = np.asarray(sampler(rng), dtype=np.float64)
        hits += bool(np.abs(x1 - x2).sum() <= 2 * rho)
    freq = hits / trials
    lo, hi = _wilson(hits, trials, confidence)
    return LevyEstimate(math.sqrt(freq), freq, hits, trials, lo, hi, confidence)


def levy_empirical(
    op: RowProductOperator,
    x,
    rho: float,
    center,
    trials: int,
    seed: int,
    spec: EnsembleSpec | None = None,
    confidence: float = 0.95,
) -> LevyEstimate:
    """Frequency of ``||M x - center||_1 <= rho`` when only the last factor of
    ``op`` is resampled from ``spec`` (Rademacher by default)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    spec = EnsembleSpec.rademacher() if spec is None else spec
    x = np.asarray(x, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    if center.shape != (op.total_rows,):
        raise ValueError(f"center must have length {op.total_rows}")
    head = op.factors[:-1]
    d_last = op.factors[-1].rows
    rng = make_rng(seed)
    if head:
        # fixed prefix rows scaled by x; each trial only needs one small matmul
        prefix = RowProductOperator(head)
        fixed = apply(prefix, np.diag(x))  # (N / d_K, n)
    hits = 0
    for _ in range(trials):
        last = sample_factor(spec, d_last, op.n, rng=rng).data
        y = (fixed @ last.T).reshape(-1) if head else last @ x
        hits += bool(np.abs(y - center).sum() <= rho)
    freq = hits / trials
    lo, hi = _wilson(hits, trials, confidence)
    return LevyEstimate(freq, freq, hits, trials, lo, hi, confidence)


def volume_ratio_witness(op: RowProductOperator) -> dict:
    """Check that ``op e_1`` is the Kronecker product of the factors' first columns.

    For sign factors that image is a vertex of the tensor-sign set ``W``, and
    its gauge in ``conv(W / sqrt(sum d_l), B_2)`` is at most ``sqrt(sum d_l)``
    (``sqrt(d K)`` for equal row counts).
    """
    for f in op.factors:
        if not np.all(np.abs(f.data) == 1.0):
            raise ValueError("volume ratio witness requires entries in {-1, +1}")
    e1 = np.zeros(op.n)
    e1[0] = 1.0
    image = apply(op, e1)
    tensor = functools.reduce(np.kron, [f.data[:, 0] for f in op.factors])
    return {
        "identity_holds": bool(np.array_equal(image, tensor)),
        "gauge_bound": math.sqrt(sum(op.row_counts)),
    }
