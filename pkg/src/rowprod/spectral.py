"""Extreme singular values of row products and the Monte Carlo checks built on them."""

from __future__ import annotations

import itertools
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .core import RowProductOperator, apply, apply_adjoint, get_caps, gram, regime_check
from .ensembles import EnsembleSpec, make_rng, sample_factors, seed_derive

__all__ = [
    "SpectralReport",
    "ConvergenceError",
    "RANK_TOL",
    "extreme_singular_values",
    "lanczos_extremes",
    "TrialSet",
    "spectrum_trial",
    "norm_trials",
    "smallest_sv_trials",
    "moment_trace",
    "moment_bound",
    "moment_bound_check",
    "submatrix_envelope",
    "submatrix_norm_audit",
    "summarize",
]

# lambda_min below RANK_TOL * lambda_max is reported as rank deficient (s_n = 0)
RANK_TOL = 1e-12


class ConvergenceError(RuntimeError):
    def __init__(self, message, *, lam_max=None, lam_min=None, iterations=None, residual=None):
        super().__init__(message)
        self.lam_max = lam_max
        self.lam_min = lam_min
        self.iterations = iterations
        self.residual = residual


@dataclass
class SpectralReport:
    s1: float
    sn: float
    kappa: float
    method: str
    iterations: int
    residual: float
    elapsed_seconds: float
    rank_deficient: bool = False

    def metrics(self) -> dict:
        """Deterministic fields only (no timing)."""
        return {
            "s1": self.s1,
            "sn": self.sn,
            "kappa": self.kappa,
            "method": self.method,
            "iterations": self.iterations,
            "residual": self.residual,
            "rank_deficient": self.rank_deficient,
        }


def _finish(op, lam_max, lam_min, v_max, v_min, method, iterations, residual, start) -> SpectralReport:
    # ||A v|| recovers s from an eigenvector far more accurately than sqrt(lambda)
    # when lambda_min is small relative to lambda_max.
    if lam_max <= 0.0:
        s1 = 0.0
    else:
        s1 = float(np.linalg.norm(apply(op, v_max)))
    rank_deficient = lam_max <= 0.0 or lam_min < RANK_TOL * lam_max
    sn = 0.0 if rank_deficient else float(np.linalg.norm(apply(op, v_min)))
    sn = min(sn, s1)
    kappa = math.inf if sn == 0.0 else s1 / sn
    return SpectralReport(
        s1=s1,
        sn=sn,
        kappa=kappa,
        method=method,
        iterations=iterations,
        residual=residual,
        elapsed_seconds=time.perf_counter() - start,
        rank_deficient=rank_deficient,
    )


def lanczos_extremes(matvec, n: int, *, tol: float = 1e-10, maxiter: int | None = None, seed: int = 0, check_every: int = 5):
    """Largest and smallest eigenpairs of a symmetric PSD operator.

    Plain Lanczos with full reorthogonalization against all previous basis
    vectors. Convergence is declared when both Ritz residuals fall below
    ``tol * lambda_max``.

    Returns ``(lam_max, lam_min, v_max, v_min, iterations, residual)``.
    """
    maxiter = n if maxiter is None else min(maxiter, n)
    rng = make_rng(seed)
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    Q = np.zeros((n, maxiter + 1))
    Q[:, 0] = q
    alphas, betas = [], []
    lam_max = lam_min = math.nan
    residual = math.inf
    v_max = v_min = q
    for k in range(maxiter):
        w = matvec(Q[:, k])
        alpha = float(Q[:, k] @ w)
        w = w - alpha * Q[:, k] - (betas[-1] * Q[:, k - 1] if k > 0 else 0.0)
        # two passes of classical Gram-Schmidt against the whole basis
        for _ in range(2):
            w -= Q[:, : k + 1] @ (Q[:, : k + 1].T @ w)
        beta = float(np.linalg.norm(w))
        alphas.append(alpha)
        m = k + 1
        exhausted = beta <= 1e-14 * max(abs(a) for a in alphas) or m == n
        if exhausted or m % check_every == 0 or m == maxiter:
            theta, S = eigh_tridiagonal(np.array(alphas), np.array(betas)) if m > 1 else (np.array(alphas), np.ones((1, 1)))
            lam_max, lam_min = float(theta[-1]), float(theta[0])
            scale = max(abs(lam_max), np.finfo(float).tiny)
            # Ritz residual ||G y - theta y|| = beta * |last component of eigvec|
            res = beta * np.abs(S[-1, [0, -1]]) / scale
            residual = 0.0 if exhausted else float(res.max())
            v_min = Q[:, :m] @ S[:, 0]
            v_max = Q[:, :m] @ S[:, -1]
            if exhausted or residual <= tol:
                return lam_max, max(lam_min, 0.0), v_max, v_min, m, residual
        betas.append(beta)
        Q[:, k + 1] = w / beta
    raise ConvergenceError(
        f"Lanczos did not converge in {maxiter} iterations (residual {residual:.3e})",
        lam_max=lam_max,
        lam_min=lam_min,
        iterations=maxiter,
        residual=residual,
    )


def extreme_singular_values(
    op: RowProductOperator,
    tol: float = 1e-10,
    method: str = "auto",
    *,
    maxiter: int | None = None,
    seed: int = 0,
    dense_max_cols: int | None = None,
) -> SpectralReport:
    """Largest and smallest singular values via the Gram spectrum.

    ``method`` is ``"dense_gram_eig"``, ``"lanczos_gram"`` or ``"auto"`` (dense
    up to ``dense_max_cols`` columns).
    """
    start = time.perf_counter()
    dense_max_cols = get_caps().dense_eig_cols if dense_max_cols is None else dense_max_cols
    if method == "auto":
        method = "dense_gram_eig" if op.n <= dense_max_cols else "lanczos_gram"
    if method == "dense_gram_eig":
        g = gram(op)
        lam, vecs = np.linalg.eigh(g)
        lam_min, lam_max = float(lam[0]), float(lam[-1])
        scale = max(abs(lam_max), np.finfo(float).tiny)
        res = [np.linalg.norm(g @ vecs[:, i] - lam[i] * vecs[:, i]) / scale for i in (0, -1)]
        return _finish(op, lam_max, lam_min, vecs[:, -1], vecs[:, 0], method, 1, float(max(res)), start)
    if method == "lanczos_gram":
        lam_max, lam_min, v_max, v_min, its, res = lanczos_extremes(
            lambda v: apply_adjoint(op, apply(op, v)), op.n, tol=tol, maxiter=maxiter, seed=seed
        )
        return _finish(op, lam_max, lam_min, v_max, v_min, method, its, res, start)
    raise ValueError(f"unknown method {method!r}")


# --------------------------------------------------------------------------
# Monte Carlo trials


@dataclass
class TrialSet:
    """Per-trial records plus summary quantiles of one scalar statistic."""

    statistic: str
    records: list[dict]
    summary: dict
    flags: list[int] = field(default_factory=list)
    regime: dict | None = None


QUANTILES = (0.0, 0.1, 0.5, 0.9, 1.0)


def summarize(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"count": 0}
    qs = np.quantile(v, QUANTILES)
    return {
        "count": int(v.size),
        "min": float(qs[0]),
        "q10": float(qs[1]),
        "q50": float(qs[2]),
        "q90": float(qs[3]),
        "max": float(qs[4]),
        "mean": float(v.mean()),
    }


def trial_seed(base: int, trial: int, tag: str) -> int:
    return seed_derive(base, trial, tag)


def spectrum_trial(spec: EnsembleSpec, d: int, n: int, K: int, seed: int) -> dict:
    """One sampled row product; returns s1, sn and the normalized ratios."""
    op = RowProductOperator(sample_factors(spec, d, n, K, seed=seed))
    rep = extreme_singular_values(op)
    root = float(d) ** (K / 2)
    return {
        **rep.metrics(),
        "norm_ratio": rep.s1 / (root + math.sqrt(n)),
        "sn_ratio": rep.sn / root,
    }


def norm_trials(spec: EnsembleSpec, d: int, n: int, K: int, trials: int, seed: int, *, threshold: float | None = None) -> TrialSet:
    """Distribution of ``s1 / (d^{K/2} + sqrt(n))`` over independent samples.

    Trials whose ratio exceeds ``threshold`` are flagged.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    records = []
    for t in range(trials):
        s = trial_seed(seed, t, "spectrum")
        m = spectrum_trial(spec, d, n, K, s)
        records.append({"trial": t, "seed": s, "s1": m["s1"], "ratio": m["norm_ratio"]})
    ratios = [r["ratio"] for r in records]
    flags = [r["trial"] for r in records if threshold is not None and r["ratio"] > threshold]
    return TrialSet("s1/(d^(K/2)+sqrt(n))", records, summarize(ratios), flags)


def smallest_sv_trials(
    spec: EnsembleSpec, d: int, n: int, K: int, trials: int, seed: int, *, c_sn: float | None = None, q: int = 1, c: float = 1.0
) -> TrialSet:
    """Distribution of ``s_n / d^{K/2}``; trials below ``c_sn`` are flagged."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    regime = regime_check(n, d, K, q, c)
    if not regime.holds:
        warnings.warn(
            f"n={n} exceeds c d^K / log_(q) d = {regime.bound:.4g}; small singular values are not controlled here",
            RuntimeWarning,
            stacklevel=2,
        )
    records = []
    for t in range(trials):
        s = trial_seed(seed, t, "spectrum")
        m = spectrum_trial(spec, d, n, K, s)
        records.append({"trial": t, "seed": s, "sn": m["sn"], "ratio": m["sn_ratio"]})
    ratios = [r["ratio"] for r in records]
    flags = [r["trial"] for r in records if c_sn is not None and r["ratio"] < c_sn]
    return TrialSet("sn/d^(K/2)", records, summarize(ratios), flags, regime.to_dict())


def moment_trace(op: RowProductOperator, p: int) -> float:
    """``trace((M M^T)^p) = trace(G^p)`` with ``G`` the Gram matrix; ``p = 0`` gives ``n``."""
    if p < 0 or int(p) != p:
        raise ValueError(f"p must be a non-negative integer, got {p!r}")
    if p == 0:
        return float(op.n)
    g = gram(op)
    with np.errstate(over="ignore", invalid="ignore"):
        half = np.eye(op.n)
        for _ in range(p // 2):
            half = half @ g
        if p % 2 == 0:
            value = float(np.sum(half * half))  # tr(H H) for symmetric H
        else:
            value = float(np.sum(half * (g @ half)))
    if not math.isfinite(value):
        warnings.warn(f"moment trace overflowed at p={p}", RuntimeWarning, stacklevel=2)
        return math.inf
    return value


def moment_bound(d: int, n: int, K: int, p: int) -> float:
    """``p^(2K+1) n (d^(1/2) + n^(1/(2K)))^(2pK)``."""
    return float(p) ** (2 * K + 1) * n * (math.sqrt(d) + n ** (1.0 / (2 * K))) ** (2 * p * K)


def moment_bound_check(spec: EnsembleSpec, d: int, n: int, K: int, p: int, trials: int, seed: int, *, c: float = 1.0) -> dict:
    """Compare the empirical mean of :func:`moment_trace` with :func:`moment_bound`.

    ``p_in_range`` reports whether ``p <= c n^(1/(12K))``; the comparison is
    computed either way.
    """
    if not spec.centered:
        raise ValueError(f"the moment bound assumes centered entries; {spec.variant!r} is not centered")
    values = []
    for t in range(trials):
        s = trial_seed(seed, t, f"moment-p{p}")
        op = RowProductOperator(sample_factors(spec, d, n, K, seed=s))
        values.append(moment_trace(op, p))
    mean = float(np.mean(values))
    bound = moment_bound(d, n, K, p)
    return {
        "p": p,
        "trials": trials,
        "empirical_mean": mean,
        "empirical_max": float(np.max(values)),
        "bound": bound,
        "slack_ratio": mean / bound,
        "holds": mean <= bound,
        "p_in_range": p <= c * n ** (1.0 / (12 * K)),
        "values": values,
    }


def submatrix_envelope(d: int, K: int, n: int, size: int) -> float:
    """``d^{K/2} + sqrt(|J|) log^{K/2}(e n / |J|)``."""
    return float(d) ** (K / 2) + math.sqrt(size) * math.log(math.e * n / size) ** (K / 2)


def _column_subsets(n: int, size: int, count: int, rng: np.random.Generator):
    total = math.comb(n, size)
    if total <= count:
        return [np.array(c) for c in itertools.combinations(range(n), size)]
    seen = set()
    out = []
    while len(out) < count:
        c = tuple(sorted(rng.choice(n, size=size, replace=False).tolist()))
        if c not in seen:
            seen.add(c)
            out.append(np.array(c))
    return out


def submatrix_norm_audit(op: RowProductOperator, sizes, samples_per_size: int, seed: int) -> dict:
    """Worst ratio of ``||M|_J||`` to the column-subset envelope, per ``|J|``.

    Uses ``min(samples_per_size, C(n, |J|))`` distinct subsets per size, drawn
    uniformly (all of them when that is every subset). Assumes a homogeneous
    row count ``d`` per factor; otherwise ``d`` is the geometric mean.
    """
    n = op.n
    counts = set(op.row_counts)
    d = counts.pop() if len(counts) == 1 else op.total_rows ** (1.0 / op.K)
    g = gram(op)
    rng = make_rng(seed)
    out = {}
    for size in sizes:
        if not 1 <= size <= n:
            raise ValueError(f"subset size {size} outside 1..{n}")
        worst = 0.0
        subsets = _column_subsets(n, size, samples_per_size, rng)
        for J in subsets:
            lam = np.linalg.eigvalsh(g[np.ix_(J, J)])[-1]
            worst = max(worst, math.sqrt(max(lam, 0.0)))
        env = submatrix_envelope(d, op.K, n, size)
        out[int(size)] = {"max_norm": worst, "envelope": env, "ratio": worst / env, "subsets": len(subsets)}
    return out
