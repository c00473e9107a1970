"""Attribute non-privacy simulation: contingency releases and the least-squares attack.

A database is a ``d x n`` binary matrix (attributes by records). The last
row is the sensitive attribute ``x``; the other ``d - 1`` rows are public. The
release for order ``K`` is ``z[S] = sum_j prod_{i in S} D'[i, j] x[j]`` over
all ``K``-element subsets ``S`` of the public rows in lexicographic order,
i.e. raw counts rather than percentages.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular
from scipy.sparse.linalg import LinearOperator, cg

from .core import CapExceededError, get_caps
from .ensembles import make_rng, seed_derive

__all__ = [
    "Database",
    "AttackInconclusive",
    "UnderdeterminedError",
    "ReleaseMatrix",
    "AttackOutcome",
    "sample_database",
    "build_release",
    "add_noise",
    "attack",
    "noise_threshold_sweep",
    "sweep_trial",
    "sweep_table",
    "run_attack",
    "sweep_csv",
    "NOISE_MODELS",
]

NOISE_MODELS = ("gaussian_spherical", "uniform_entrywise", "integer_rounding")
# s_n below this fraction of s_1 means the release matrix has no usable left inverse
ATTACK_RANK_TOL = 1e-10


class AttackInconclusive(np.linalg.LinAlgError):
    def __init__(self, sn: float, s1: float):
        self.sn = sn
        self.s1 = s1
        super().__init__(f"attack inconclusive: release matrix is rank deficient (s_n={sn:.3e}, s_1={s1:.3e})")


class UnderdeterminedError(ValueError):
    pass


@dataclass
class Database:
    entries: np.ndarray  # (d, n) uint8
    probs: np.ndarray  # (d,)
    seed: int | None = None

    def __post_init__(self):
        e = np.asarray(self.entries)
        if e.ndim != 2:
            raise ValueError("database must be 2-dimensional")
        if not np.all((e == 0) | (e == 1)):
            raise ValueError("database entries must be 0 or 1")
        self.entries = e.astype(np.uint8)
        self.probs = np.asarray(self.probs, dtype=np.float64).reshape(-1)
        if self.probs.size != e.shape[0]:
            raise ValueError("need one probability per attribute row")

    @property
    def d(self) -> int:
        return self.entries.shape[0]

    @property
    def n(self) -> int:
        return self.entries.shape[1]

    @property
    def public(self) -> np.ndarray:
        return self.entries[:-1]

    @property
    def sensitive(self) -> np.ndarray:
        return self.entries[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for row in self.entries:
            w.writerow(int(v) for v in row)
        return buf.getvalue()

    def sidecar(self) -> dict:
        return {"p_j": self.probs.tolist(), "seed": self.seed}

    def save(self, csv_path) -> None:
        csv_path = Path(csv_path)
        csv_path.write_text(self.to_csv())
        csv_path.with_suffix(".json").write_text(json.dumps(self.sidecar()))

    @classmethod
    def load(cls, csv_path) -> "Database":
        csv_path = Path(csv_path)
        with csv_path.open(newline="") as fh:
            rows = [[int(v) for v in row] for row in csv.reader(fh) if row]
        meta = json.loads(csv_path.with_suffix(".json").read_text())
        return cls(np.array(rows, dtype=np.uint8), np.array(meta["p_j"]), meta.get("seed"))


def sample_database(d: int, n: int, p_range=(0.3, 0.7), seed: int = 0) -> Database:
    """Independent Bernoulli entries; row ``j`` uses ``p_j`` drawn uniformly from ``p_range``."""
    lo, hi = p_range
    if not 0.0 < lo < hi < 1.0:
        raise ValueError(f"need 0 < p' < p'' < 1, got {p_range}")
    rng = make_rng(seed)
    probs = rng.uniform(lo, hi, size=d)
    entries = (rng.random((d, n)) < probs[:, None]).astype(np.uint8)
    return Database(entries, probs, seed)


class ReleaseMatrix:
    """Rows are entrywise products of the public rows in each ``K``-subset."""

    def __init__(self, public, K: int, cap: int | None = None):
        public = np.asarray(public, dtype=np.float64)
        if public.ndim != 2:
            raise ValueError("public rows must form a 2-dimensional array")
        if K < 1 or K > public.shape[0]:
            raise ValueError(f"K must satisfy 1 <= K <= {public.shape[0]} (public rows), got {K}")
        self.public = public
        self.K = K
        self.subsets = list(itertools.combinations(range(public.shape[0]), K))
        self.cap = get_caps().materialize_entries if cap is None else cap

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.subsets), self.public.shape[1])

    @property
    def dense_feasible(self) -> bool:
        return self.shape[0] * self.shape[1] <= self.cap

    def row(self, i: int) -> np.ndarray:
        return np.prod(self.public[list(self.subsets[i])], axis=0)

    def _rows(self, start: int, stop: int) -> np.ndarray:
        idx = np.array(self.subsets[start:stop], dtype=np.intp)
        return np.prod(self.public[idx], axis=1)

    def materialize(self) -> np.ndarray:
        if not self.dense_feasible:
            raise CapExceededError("release matrix", self.shape[0] * self.shape[1], self.cap)
        return self._rows(0, len(self.subsets))

    def _chunks(self):
        step = max(1, self.cap // max(1, self.shape[1]))
        for start in range(0, len(self.subsets), step):
            yield start, min(start + step, len(self.subsets))

    def matvec(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.concatenate([self._rows(a, b) @ x for a, b in self._chunks()])

    def rmatvec(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        out = np.zeros(self.shape[1])
        for a, b in self._chunks():
            out += self._rows(a, b).T @ y[a:b]
        return out

    def gram(self) -> np.ndarray:
        g = np.zeros((self.shape[1], self.shape[1]))
        for a, b in self._chunks():
            rows = self._rows(a, b)
            g += rows.T @ rows
        return g

    def singular_extremes(self) -> tuple[float, float]:
        """``(s_1, s_n)`` of the release matrix."""
        if self.dense_feasible:
            s = np.linalg.svd(self.materialize(), compute_uv=False)
            if self.shape[0] < self.shape[1]:
                return float(s[0]), 0.0
            return float(s[0]), float(s[-1])
        lam = np.linalg.eigvalsh(self.gram())
        return math.sqrt(max(lam[-1], 0.0)), math.sqrt(max(lam[0], 0.0))


def build_release(public, x, K: int, cap: int | None = None) -> np.ndarray:
    public = np.asarray(public)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (public.shape[1],):
        raise ValueError(f"sensitive vector must have length {public.shape[1]}")
    if K >= public.shape[0] + 1:
        raise ValueError(f"K={K} must be smaller than the attribute count {public.shape[0] + 1}")
    rel = ReleaseMatrix(public, K, cap)
    return rel.materialize() @ x if rel.dense_feasible else rel.matvec(x)


def add_noise(z, target_norm: float, model: str = "gaussian_spherical", seed: int = 0, *, direction=None):
    """Return ``(z_noisy, noise)``.

    ``gaussian_spherical`` and ``uniform_entrywise`` rescale a random vector
    to Euclidean norm ``target_norm`` exactly; ``direction`` overrides the
    random vector. ``integer_rounding`` rounds ``z + U(-1/2, 1/2)`` to
    integers and ignores ``target_norm``.
    """
    z = np.asarray(z, dtype=np.float64)
    if not math.isfinite(target_norm) or target_norm < 0:
        raise ValueError(f"target_norm must be finite and non-negative, got {target_norm}")
    if model not in NOISE_MODELS:
        raise ValueError(f"unknown noise model {model!r}")
    rng = make_rng(seed)
    if model == "integer_rounding":
        noisy = np.floor(z + rng.uniform(-0.5, 0.5, size=z.shape) + 0.5)
        return noisy, noisy - z
    if target_norm == 0:
        return z.copy(), np.zeros_like(z)
    if direction is None:
        direction = rng.standard_normal(z.shape) if model == "gaussian_spherical" else rng.uniform(-1, 1, z.shape)
    direction = np.asarray(direction, dtype=np.float64)
    noise = direction * (target_norm / np.linalg.norm(direction))
    return z + noise, noise


def attack(public, z_noisy, K: int, release: ReleaseMatrix | None = None):
    """Least-squares reconstruction of the sensitive row.

    Returns ``(x_real, x_binary)`` where ``x_binary[j] = 1`` iff
    ``x_real[j] >= 1/2``. Raises :class:`AttackInconclusive` when the release
    matrix lacks full column rank.
    """
    rel = ReleaseMatrix(public, K) if release is None else release
    z = np.asarray(z_noisy, dtype=np.float64)
    if z.shape != (rel.shape[0],):
        raise ValueError(f"release vector must have length {rel.shape[0]}")
    s1, sn = rel.singular_extremes()
    if sn <= ATTACK_RANK_TOL * s1:
        raise AttackInconclusive(sn, s1)
    if rel.dense_feasible:
        q, r = np.linalg.qr(rel.materialize())
        x_real = solve_triangular(r, q.T @ z)
    else:
        n = rel.shape[1]
        normal = LinearOperator((n, n), matvec=lambda v: rel.rmatvec(rel.matvec(v)), dtype=np.float64)
        x_real, info = cg(normal, rel.rmatvec(z), rtol=1e-12, maxiter=10 * n)
        if info != 0:
            raise np.linalg.LinAlgError(f"normal-equation solve did not converge (info={info})")
    return x_real, (x_real >= 0.5).astype(np.uint8)


@dataclass
class AttackOutcome:
    l2_error: float
    recovery_fraction: float
    noise_norm: float
    sn_release: float
    noise_ratio: float

    @property
    def bound_holds(self) -> bool:
        """``l2_error <= noise_norm / s_n`` up to a 1e-9 relative slack."""
        if self.sn_release <= 0:
            return True
        bound = self.noise_norm / self.sn_release
        return self.l2_error <= bound * (1 + 1e-9) + 1e-12

    def to_dict(self) -> dict:
        return dict(
            l2_error=self.l2_error,
            recovery_fraction=self.recovery_fraction,
            noise_norm=self.noise_norm,
            sn_release=self.sn_release,
            noise_ratio=self.noise_ratio,
            bound_holds=self.bound_holds,
        )


def run_attack(db: Database, K: int, noise_ratio: float, model: str = "gaussian_spherical", seed: int = 0, *, direction=None, release=None, sn=None) -> AttackOutcome:
    """Release, perturb with ``||noise|| = noise_ratio * sqrt(n) * s_n`` and attack."""
    rel = ReleaseMatrix(db.public, K) if release is None else release
    if sn is None:
        sn = rel.singular_extremes()[1]
    x = db.sensitive.astype(np.float64)
    z = rel.materialize() @ x if rel.dense_feasible else rel.matvec(x)
    target = noise_ratio * math.sqrt(db.n) * sn
    z_noisy, noise = add_noise(z, target, model, seed, direction=direction)
    x_real, x_hat = attack(db.public, z_noisy, K, release=rel)
    noise_norm = float(np.linalg.norm(noise))
    return AttackOutcome(
        l2_error=float(np.linalg.norm(x - x_real)),
        recovery_fraction=float(np.mean(x_hat == db.sensitive)),
        noise_norm=noise_norm,
        sn_release=sn,
        noise_ratio=noise_norm / (math.sqrt(db.n) * sn),
    )


DEFAULT_RATIOS = (0.0, 0.01, 0.1, 0.5, 1.0, 2.0, 5.0)


def _sweep_settings(config: dict):
    d, n, K = int(config["d"]), int(config["n"]), int(config["K"])
    if K >= d:
        raise ValueError(f"K={K} must be smaller than d={d}")
    rows = math.comb(d - 1, K)
    if rows < n:
        raise UnderdeterminedError(f"C({d - 1},{K}) = {rows} release rows cannot determine n = {n} records")
    ratios = [float(r) for r in config.get("noise_ratios", DEFAULT_RATIOS)]
    return d, n, K, ratios, config.get("model", "gaussian_spherical"), tuple(config.get("p_range", (0.3, 0.7)))


def sweep_trial(config: dict, trial: int) -> dict:
    """One database of the sweep, attacked at every noise ratio.

    All ratios share the trial's database and noise direction, so recovery
    depends on the ratio only through the noise scale.
    """
    d, n, K, ratios, model, p_range = _sweep_settings(config)
    base = int(config.get("seed", 0))
    db_seed = seed_derive(base, trial, "privacy-db")
    noise_seed = seed_derive(base, trial, "privacy-noise")
    db = sample_database(d, n, p_range, db_seed)
    rel = ReleaseMatrix(db.public, K)
    s1, sn = rel.singular_extremes()
    rank_ok = bool(sn > ATTACK_RANK_TOL * s1)
    rec = {"trial": trial, "seed": db_seed, "noise_seed": noise_seed, "full_rank": rank_ok, "sn_release": sn, "outcomes": []}
    if rank_ok:
        direction = make_rng(noise_seed).standard_normal(rel.shape[0]) if model == "gaussian_spherical" else None
        for r in ratios:
            out = run_attack(db, K, r, model, noise_seed, direction=direction, release=rel, sn=sn)
            rec["outcomes"].append({"target_ratio": r, **out.to_dict()})
    return rec


def sweep_table(records, ratios) -> list[dict]:
    table = []
    for r in ratios:
        vals = np.asarray([o["recovery_fraction"] for rec in records for o in rec["outcomes"] if o["target_ratio"] == r])
        if vals.size:
            med, q10, q90 = (float(v) for v in np.quantile(vals, [0.5, 0.1, 0.9]))
        else:
            med = q10 = q90 = math.nan
        table.append({"noise_ratio": r, "median_recovery": med, "q10": q10, "q90": q90, "trials": int(vals.size)})
    return table


def noise_threshold_sweep(config: dict) -> dict:
    """Median recovery fraction against noise ratio over random databases.

    ``config`` keys: ``d``, ``n``, ``K``, ``p_range`` (default ``(0.3, 0.7)``),
    ``noise_ratios``, ``trials``, ``seed``, ``model``. Noise norms are
    ``ratio * sqrt(n) * s_n`` of each instance's release matrix.
    """
    _, _, _, ratios, _, _ = _sweep_settings(config)
    trials = int(config.get("trials", 100))
    records = [sweep_trial(config, t) for t in range(trials)]
    table = sweep_table(records, ratios)
    medians = [row["median_recovery"] for row in table]
    return {
        "table": table,
        "records": records,
        "full_rank_rate": sum(r["full_rank"] for r in records) / trials,
        "monotone": all(a >= b for a, b in zip(medians, medians[1:])),
    }


def sweep_csv(table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["noise_ratio", "median_recovery", "q10", "q90", "trials"])
    for row in table:
        w.writerow([repr(row["noise_ratio"]), repr(row["median_recovery"]), repr(row["q10"]), repr(row["q90"]), row["trials"]])
    return buf.getvalue()
