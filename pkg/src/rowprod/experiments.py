"""Per-kind trial functions and run-level checks.

Every experiment kind has a trial function ``f(cfg, trial, seed) -> metrics``
that depends only on its arguments, and an ``evaluate`` step that turns the
ordered list of trial metrics into named pass/fail checks. The CLI and the
calibration script both go through :func:`run_trial` and :func:`evaluate`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import calibration as cal
from .core import RowProductOperator, apply, apply_adjoint, caps_override, gram, materialize, regime_check
from .ensembles import EnsembleSpec, make_rng, sample_factor, sample_factors, seed_derive
from .geometry import (
    block_decompose,
    kashin_audit,
    l1_min_probe,
    levy_empirical,
    levy_pair_bound,
    sample_flat_ball_point,
    v_condition_audit,
    volume_ratio_witness,
)
from .privacy import AttackInconclusive, run_attack, sample_database, sweep_table, sweep_trial
from .spectral import extreme_singular_values, moment_bound, moment_trace, submatrix_norm_audit, summarize

KINDS = ("verify", "spectrum", "moments", "l1probe", "kashin", "qnorm", "levy", "privacy-attack", "sweep", "witness")

DEFAULTS: dict[str, dict] = {
    "verify": {"dims": {"d": 6, "n": 8, "K": 3}, "trials": 100, "params": {}},
    "spectrum": {"dims": {"d": 64, "n": 512, "K": 2}, "trials": 200, "params": {}},
    "moments": {"dims": {"d": 16, "n": 64, "K": 2}, "trials": 100, "params": {"p_values": [1, 2]}},
    "l1probe": {"dims": {"d": 16, "n": 48, "K": 2}, "trials": 20, "params": {"restarts": 50, "steps": 2000}},
    "kashin": {"dims": {"d": 16, "n": 48, "K": 2}, "trials": 20, "params": {"images": 200, "restarts": 50, "steps": 2000}},
    "qnorm": {"dims": {"d": 32, "n": 64, "K": 1}, "trials": 50, "params": {"directions": 100}},
    "levy": {"dims": {"d": 1, "n": 1, "K": 1}, "trials": 1, "params": {"mode": "pair_scalar", "rho": 0.5, "pairs": 10000}},
    "privacy-attack": {"dims": {"d": 13, "n": 60, "K": 2}, "trials": 100, "params": {"noise_ratio": 0.01}},
    "sweep": {
        "dims": {"d": 13, "n": 60, "K": 2},
        "trials": 100,
        "params": {"noise_ratios": [0.0, 0.01, 0.1, 0.5, 1.0, 2.0, 5.0], "min_full_rank_rate": 0.95},
    },
    "witness": {"dims": {"d": 4, "n": 6, "K": 3}, "trials": 100, "params": {"block_samples": 100}},
}


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    acceptance: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def _ensemble(cfg) -> EnsembleSpec:
    return EnsembleSpec.from_dict(cfg["ensemble"])


def _dims(cfg):
    dims = cfg["dims"]
    return int(dims["d"]), int(dims["n"]), int(dims["K"])


def _op(cfg, seed: int) -> RowProductOperator:
    d, n, K = _dims(cfg)
    return RowProductOperator(sample_factors(_ensemble(cfg), d, n, K, seed=seed))


def _reference(cfg, constant: str) -> float | None:
    """Calibrated value of ``constant`` if this run matches its pilot config."""
    constants = cal.load_calibration()
    entry = constants.entry(constant)
    if entry is None:
        return None
    ref = entry.provenance["config"]
    d, n, K = _dims(cfg)
    if ref["ensemble"] != cfg["ensemble"] or (ref["d"], ref["n"], ref["K"]) != (d, n, K):
        return None
    for key in ref.get("match_params", []):
        if cfg["params"].get(key, ref["params"][key]) != ref["params"][key]:
            return None
    return entry.value


# --------------------------------------------------------------------------
# trial functions


def _svd_oracle(op: RowProductOperator) -> dict:
    """Compare the reported extremes with a dense SVD of the materialized matrix.

    An oracle ``s_n`` below ``1e-6 s_1`` counts as rank deficient; the report
    must then also say ``s_n = 0``.
    """
    rep = extreme_singular_values(op)
    s = np.linalg.svd(materialize(op), compute_uv=False)
    s1_ref = float(s[0])
    sn_ref = float(s[-1]) if op.total_rows >= op.n else 0.0
    s1_err = abs(rep.s1 - s1_ref) / s1_ref if s1_ref > 0 else abs(rep.s1)
    if sn_ref <= 1e-6 * s1_ref:
        sn_err = 0.0 if rep.sn == 0.0 else math.inf
    else:
        sn_err = abs(rep.sn - sn_ref) / sn_ref
    return {"s1_rel_err": s1_err, "sn_rel_err": sn_err, "s1": rep.s1, "sn": rep.sn, "s1_svd": s1_ref, "sn_svd": sn_ref}


VERIFY_ENSEMBLES = (
    {"variant": "rademacher"},
    {"variant": "ternary_uniform"},
    {"variant": "centered_bernoulli", "p": 0.3},
    {"variant": "raw_bernoulli", "p": 0.5},
    {"variant": "finite_table", "values": [-0.5, 0.0, 0.5], "probs": [0.25, 0.5, 0.25]},
)


def verify_instance(seed: int, max_d: int = 6, max_n: int = 8, max_K: int = 3, *, square_ok: bool = True) -> RowProductOperator:
    """Random small row product from a random ensemble with random row counts."""
    rng = make_rng(seed)
    spec = EnsembleSpec.from_dict(VERIFY_ENSEMBLES[int(rng.integers(len(VERIFY_ENSEMBLES)))])
    n = int(rng.integers(1, (max_n if square_ok else min(max_n, max_d**max_K)) + 1))
    while True:
        K = int(rng.integers(1, max_K + 1))
        rows = [int(r) for r in rng.integers(1, max_d + 1, size=K)]
        if square_ok or math.prod(rows) >= n:
            break
    return RowProductOperator([sample_factor(spec, r, n, rng=rng) for r in rows])


def structural_errors(op: RowProductOperator, seed: int) -> dict:
    """Max-entry errors of gram/apply/apply_adjoint against the materialized matrix."""
    rng = make_rng(seed)
    M = materialize(op)
    x = rng.standard_normal(op.n)
    y = rng.standard_normal(op.total_rows)
    ax, aty = apply(op, x), apply_adjoint(op, y)
    pairing = abs(ax @ y - x @ aty) / max(np.linalg.norm(x) * np.linalg.norm(y) * np.linalg.norm(M), 1e-300)
    return {
        "gram_err": float(np.max(np.abs(gram(op) - M.T @ M))),
        "apply_err": float(np.max(np.abs(ax - M @ x))),
        "adjoint_err": float(np.max(np.abs(aty - M.T @ y))),
        "pairing_rel": float(pairing),
    }


def trial_verify(cfg, trial, seed):
    d, n, K = _dims(cfg)
    op = verify_instance(seed_derive(seed, 0, "structure"), d, n, K)
    metrics = {"K": op.K, "rows": list(op.row_counts), "n": op.n, **structural_errors(op, seed_derive(seed, 0, "vectors"))}
    svd_op = verify_instance(seed_derive(seed, 0, "svd"), min(d, 5), max(n, 10), K, square_ok=False)
    metrics.update(_svd_oracle(svd_op))
    wrng = make_rng(seed_derive(seed, 0, "witness"))
    Kw = int(wrng.integers(1, min(K, 3) + 1))
    dw = int(wrng.integers(1, min(d, 4) + 1))
    sign_op = RowProductOperator(sample_factors(EnsembleSpec.rademacher(), dw, n, Kw, seed=seed_derive(seed, 0, "sign")))
    metrics["witness_identity"] = volume_ratio_witness(sign_op)["identity_holds"]
    return metrics


def trial_spectrum(cfg, trial, seed):
    d, n, K = _dims(cfg)
    op = _op(cfg, seed)
    rep = extreme_singular_values(op)
    root = float(d) ** (K / 2)
    out = {
        **rep.metrics(),
        "norm_ratio": rep.s1 / (root + math.sqrt(n)),
        "sn_ratio": rep.sn / root,
    }
    sizes = cfg["params"].get("subset_sizes")
    if sizes:
        audit = submatrix_norm_audit(op, sizes, int(cfg["params"].get("subset_samples", 50)), seed_derive(seed, 0, "subsets"))
        out["subset_ratios"] = {str(k): v["ratio"] for k, v in audit.items()}
        out["subset_max_ratio"] = max(v["ratio"] for v in audit.values())
    return out


def trial_moments(cfg, trial, seed):
    op = _op(cfg, seed)
    return {f"trace_p{p}": moment_trace(op, int(p)) for p in cfg["params"].get("p_values", [1, 2])}


def _probe(cfg, op, seed):
    p = cfg["params"]
    return l1_min_probe(
        op,
        restarts=int(p.get("restarts", 50)),
        steps=int(p.get("steps", 2000)),
        step_schedule=tuple(p.get("step_schedule", (1.0, 10.0))),
        seed=seed_derive(seed, 0, "probe"),
    )


def trial_l1probe(cfg, trial, seed):
    op = _op(cfg, seed)
    res = _probe(cfg, op, seed)
    return {"best_value": res.best_value, "ratio": res.best_value / op.total_rows, "restart_values": res.restart_values}


def trial_kashin(cfg, trial, seed):
    op = _op(cfg, seed)
    probe = _probe(cfg, op, seed) if int(cfg["params"].get("restarts", 50)) > 0 else None
    audit = kashin_audit(op, int(cfg["params"].get("images", 200)), probe, seed_derive(seed, 0, "images"))
    out = {k: audit[k] for k in ("images", "zero_images", "cs_violations", "max_equivalence_ratio")}
    if probe is not None:
        out["probe_value"] = probe.best_value
    return out


def trial_qnorm(cfg, trial, seed):
    op = _op(cfg, seed)
    audit = v_condition_audit(op, seed=seed_derive(seed, 0, "directions"), n_random=int(cfg["params"].get("directions", 100)))
    return {"min_ratio": audit["min_ratio"], "argmin": audit["argmin"], "count": audit["count"]}


def _scalar_rademacher(rng):
    return rng.choice([-1.0, 1.0], size=1)


def trial_levy(cfg, trial, seed):
    p = cfg["params"]
    mode = p.get("mode", "pair_scalar")
    pairs = int(p.get("pairs", 10000))
    if mode == "pair_scalar":
        rho = float(p.get("rho", 0.5))
        est = levy_pair_bound(_scalar_rademacher, rho, pairs, seed)
        return {"mode": mode, "rho": rho, **est.to_dict()}
    if mode == "empirical":
        d, n, K = _dims(cfg)
        spec = _ensemble(cfg)
        op = _op(cfg, seed)
        x = make_rng(seed_derive(seed, 0, "x")).standard_normal(n)
        x /= np.linalg.norm(x)
        c_tilde = cal.load_calibration().value("c_tilde")
        rho = float(p["rho"]) if "rho" in p else float(p.get("rho_scale", 0.1)) * c_tilde * op.total_rows
        point = levy_empirical(op, x, rho, np.zeros(op.total_rows), pairs, seed_derive(seed, 0, "point"), spec)
        head = RowProductOperator(op.factors[:-1]) if op.K > 1 else None
        fixed = apply(head, np.diag(x)) if head is not None else None

        def image(rng):
            last = sample_factor(spec, op.factors[-1].rows, n, rng=rng).data
            return (fixed @ last.T).reshape(-1) if fixed is not None else last @ x

        pair = levy_pair_bound(image, rho, pairs, seed_derive(seed, 0, "pair"))
        return {
            "mode": mode,
            "rho": rho,
            "hits": point.hits,
            "frequency": point.frequency,
            "ci_high": point.ci_high,
            "pair_estimate": pair.estimate,
            "pair_ci_high": pair.ci_high,
        }
    raise ValueError(f"unknown levy mode {mode!r}")


def trial_privacy(cfg, trial, seed):
    d, n, K = _dims(cfg)
    p = cfg["params"]
    db = sample_database(d, n, tuple(p.get("p_range", (0.3, 0.7))), seed)
    try:
        out = run_attack(db, K, float(p.get("noise_ratio", 0.0)), p.get("model", "gaussian_spherical"), seed_derive(seed, 0, "noise"))
    except AttackInconclusive as exc:
        return {"full_rank": False, "sn_release": exc.sn}
    return {"full_rank": True, **out.to_dict()}


def trial_sweep(cfg, trial, seed):
    d, n, K = _dims(cfg)
    p = cfg["params"]
    config = {"d": d, "n": n, "K": K, "seed": cfg["base_seed"], **{k: p[k] for k in ("noise_ratios", "model", "p_range") if k in p}}
    rec = sweep_trial(config, trial)
    rec.pop("trial")
    rec.pop("seed")
    return rec


def trial_witness(cfg, trial, seed):
    d, n, K = _dims(cfg)
    rng = make_rng(seed)
    Kw = int(rng.integers(1, K + 1))
    rows = [int(r) for r in rng.integers(1, d + 1, size=Kw)]
    op = RowProductOperator([sample_factor(EnsembleSpec.rademacher(), r, n, rng=rng) for r in rows])
    w = volume_ratio_witness(op)
    worst = 0.0
    for _ in range(int(cfg["params"].get("block_samples", 100))):
        m = int(rng.integers(2, 400))
        b = float(math.exp(rng.uniform(math.log(1 / math.sqrt(m)), math.log(0.999))))
        x = sample_flat_ball_point(m, b, rng)
        l = int(rng.integers(1, int(math.floor(b**-2)) + 1))
        worst = max(worst, block_decompose(x, l).weighted_sum(x))
    return {"rows": rows, **w, "block_sum_max": worst}


TRIALS = {
    "verify": trial_verify,
    "spectrum": trial_spectrum,
    "moments": trial_moments,
    "l1probe": trial_l1probe,
    "kashin": trial_kashin,
    "qnorm": trial_qnorm,
    "levy": trial_levy,
    "privacy-attack": trial_privacy,
    "sweep": trial_sweep,
    "witness": trial_witness,
}


def trial_seed(cfg, trial: int) -> int:
    return seed_derive(int(cfg["base_seed"]), trial, cfg["kind"])


def run_trial(cfg: dict, trial: int) -> dict:
    """Run trial ``trial`` of ``cfg``; returns ``(seed, metrics)``."""
    seed = trial_seed(cfg, trial)
    with caps_override(**cfg.get("caps", {})):
        return seed, TRIALS[cfg["kind"]](cfg, trial, seed)


# --------------------------------------------------------------------------
# run-level checks


def _all(metrics, key, pred):
    return [i for i, m in enumerate(metrics) if key in m and not pred(m[key])]


def evaluate(cfg: dict, metrics: list[dict]) -> tuple[list[Check], dict]:
    """Checks and summary statistics for a finished run."""
    kind = cfg["kind"]
    d, n, K = _dims(cfg)
    checks: list[Check] = []
    summary: dict = {}

    if kind in ("spectrum", "l1probe", "kashin"):
        q = int(cfg["dims"].get("q", 1))
        summary["regime"] = regime_check(n, d, K, q, 1.0).to_dict()

    if kind == "verify":
        for key, tol in (("gram_err", 1e-12), ("apply_err", 1e-12), ("adjoint_err", 1e-12), ("pairing_rel", 1e-10), ("s1_rel_err", 1e-8), ("sn_rel_err", 1e-8)):
            worst = max(m[key] for m in metrics)
            summary[key] = worst
            checks.append(Check(f"{key} <= {tol:g}", worst <= tol, f"max {worst:.3e} over {len(metrics)} instances"))
        bad = [i for i, m in enumerate(metrics) if not m["witness_identity"]]
        checks.append(Check("e_1 witness identity", not bad, f"failures at trials {bad}"))

    elif kind == "spectrum":
        for key in ("s1", "sn", "kappa", "norm_ratio", "sn_ratio"):
            summary[key] = summarize([m[key] for m in metrics if math.isfinite(m[key])])
        if _ensemble(cfg).is_sign:
            floor = float(d) ** (K / 2)
            bad = _all(metrics, "s1", lambda v: v >= floor)
            checks.append(Check("s1 >= d^(K/2) (column-norm floor)", not bad, f"{len(bad)} violations"))
        t1 = _reference(cfg, "C_norm")
        if t1 is not None:
            worst = max(m["norm_ratio"] for m in metrics)
            checks.append(Check(f"max s1/(d^(K/2)+sqrt n) <= {t1:.6g}", worst <= t1, f"observed max {worst:.6g}"))
        t2 = _reference(cfg, "c_sn")
        if t2 is not None:
            worst = min(m["sn_ratio"] for m in metrics)
            checks.append(Check(f"min sn/d^(K/2) >= {t2:.6g}", worst >= t2, f"observed min {worst:.6g}"))
        if any("subset_max_ratio" in m for m in metrics):
            worst = max(m["subset_max_ratio"] for m in metrics)
            summary["subset_max_ratio"] = worst
            ck = _reference(cfg, "C_2")
            if ck is not None:
                checks.append(Check(f"subset norm ratio <= C_2 = {ck:.6g}", worst <= ck, f"observed max {worst:.6g}"))

    elif kind == "moments":
        for p in cfg["params"].get("p_values", [1, 2]):
            vals = [m[f"trace_p{p}"] for m in metrics]
            mean = float(np.mean(vals))
            bound = moment_bound(d, n, K, int(p))
            summary[f"p{p}"] = {
                "empirical_mean": mean,
                "bound": bound,
                "slack_ratio": mean / bound,
                "p_in_range": int(p) <= n ** (1.0 / (12 * K)),
            }
            checks.append(Check(f"mean trace(G^{p}) <= moment bound", mean <= bound, f"mean {mean:.6g}, bound {bound:.6g}, slack {mean / bound:.3e}"))

    elif kind == "l1probe":
        ratios = [m["ratio"] for m in metrics]
        summary["ratio"] = summarize(ratios)
        t3 = _reference(cfg, "c_l1")
        if t3 is not None:
            checks.append(Check(f"min probe/d^K >= {t3:.6g}", min(ratios) >= t3, f"observed min {min(ratios):.6g}"))
        if cfg["params"].get("degenerate_control", True):
            ones = RowProductOperator([np.ones((d, n))] * K)
            ctrl = _probe(cfg, ones, seed_derive(int(cfg["base_seed"]), 0, "control"))
            value = ctrl.best_value / ones.total_rows
            summary["control_ratio"] = value
            checks.append(Check("all-ones control probe < 0.01 d^K", value < 0.01, f"control ratio {value:.3e}"))

    elif kind == "kashin":
        total = sum(m["cs_violations"] for m in metrics)
        worst = max(m["max_equivalence_ratio"] for m in metrics)
        summary.update(cs_violations=total, max_equivalence_ratio=worst)
        checks.append(Check("||y||_1 <= sqrt(N)||y||_2 on every image", total == 0, f"{total} violations"))
        t4 = _reference(cfg, "C_kashin")
        if t4 is not None:
            checks.append(Check(f"max sqrt(N)||y||_2/||y||_1 <= {t4:.6g}", worst <= t4, f"observed max {worst:.6g}"))

    elif kind == "qnorm":
        worst = min(m["min_ratio"] for m in metrics)
        summary["min_ratio"] = worst
        ct = _reference(cfg, "c_tilde")
        if ct is not None:
            checks.append(Check(f"min Q-norm ratio >= c_tilde = {ct:.6g}", worst >= ct, f"observed min {worst:.6g}"))

    elif kind == "levy":
        mode = cfg["params"].get("mode", "pair_scalar")
        if mode == "pair_scalar":
            for m in metrics:
                expected = 1.0 if m["rho"] >= 1.0 else 0.5
                sigma = math.sqrt(expected * (1 - expected) / m["trials"])
                dev = abs(m["frequency"] - expected)
                checks.append(Check("pair frequency within 3 sigma of exact value", dev <= 3 * sigma + 1e-15, f"freq {m['frequency']:.4f}, exact {expected}, sigma {sigma:.4f}"))
        else:
            bad = [i for i, m in enumerate(metrics) if m["frequency"] > m["pair_ci_high"] ** 0.5 + 1e-15]
            checks.append(Check("pair bound dominates point frequency", not bad, f"violations at {bad}"))
            summary["hits"] = sum(m["hits"] for m in metrics)

    elif kind == "privacy-attack":
        ok = [m for m in metrics if m["full_rank"]]
        summary["full_rank_rate"] = len(ok) / len(metrics)
        summary["recovery"] = summarize([m["recovery_fraction"] for m in ok])
        bad = [i for i, m in enumerate(metrics) if m["full_rank"] and not m["bound_holds"]]
        checks.append(Check("l2_error <= noise_norm / s_n", not bad, f"violations at {bad}"))
        if float(cfg["params"].get("noise_ratio", 0.0)) == 0.0:
            bad = [i for i, m in enumerate(metrics) if m["full_rank"] and m["recovery_fraction"] != 1.0]
            checks.append(Check("noiseless recovery is exact", not bad, f"failures at {bad}"))

    elif kind == "sweep":
        ratios = [float(r) for r in cfg["params"].get("noise_ratios", DEFAULTS["sweep"]["params"]["noise_ratios"])]
        table = sweep_table(metrics, ratios)
        summary["table"] = table
        rate = sum(m["full_rank"] for m in metrics) / len(metrics)
        summary["full_rank_rate"] = rate
        outcomes = [o for m in metrics for o in m["outcomes"]]
        bad = sum(not o["bound_holds"] for o in outcomes if o["target_ratio"] > 0)
        checks.append(Check("l2_error <= noise_norm / s_n in every noisy attack", bad == 0, f"{bad} violations"))
        noiseless = [o for o in outcomes if o["target_ratio"] == 0.0]
        bad = sum(o["recovery_fraction"] != 1.0 for o in noiseless)
        checks.append(Check("noiseless recovery = 1.0 in every full-rank trial", bad == 0, f"{bad} failures of {len(noiseless)}"))
        need = float(cfg["params"].get("min_full_rank_rate", 0.95))
        checks.append(Check(f"full-rank rate >= {need:g}", rate >= need, f"observed {rate:.3f}"))
        for row in table:
            if row["noise_ratio"] == 0.01:
                checks.append(Check("median recovery at ratio 0.01 >= 0.99", row["median_recovery"] >= 0.99, f"median {row['median_recovery']:.4f}"))
        meds = [row["median_recovery"] for row in table]
        mono = all(a >= b for a, b in zip(meds, meds[1:]))
        checks.append(Check("median recovery non-increasing in noise ratio", mono, f"medians {meds}"))

    elif kind == "witness":
        bad = [i for i, m in enumerate(metrics) if not m["identity_holds"]]
        checks.append(Check("op e_1 equals Kronecker product of first columns", not bad, f"failures at {bad}"))
        worst = max(m["block_sum_max"] for m in metrics)
        summary["block_sum_max"] = worst
        checks.append(Check("block decomposition weighted sum <= 5", worst <= 5.0, f"observed max {worst:.6f}"))

    return checks, summary
