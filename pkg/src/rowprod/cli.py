"""Command-line experiment runner.

    rowprod <kind> [--config path.json] [--seed N] [--deterministic] [--out dir]

Writes ``<kind>.jsonl`` (one record per trial, in trial order),
``<kind>_summary.csv`` and ``<kind>_run.json`` into the output directory; the
``sweep`` kind also writes ``sweep.csv``. Timing lives under each record's
``meta`` key, which is the only part that differs between identical
deterministic runs.

Exit codes: 0 success, 1 a check failed, 2 config error, 3 resource error.
The number of worker processes is read from ``ROWPROD_WORKERS`` (default 1);
``--deterministic`` always runs sequentially.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import jsonschema

from .core import CapExceededError
from .ensembles import RNG_NAME, RNG_VERSION, EnsembleSpec
from .experiments import DEFAULTS, KINDS, evaluate, run_trial
from .privacy import sweep_csv
from .spectral import ConvergenceError, summarize

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_RESOURCE = 0, 1, 2, 3
SCHEMA_VERSION = 1

_POSITIVE_INT = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "kind": {"enum": list(KINDS)},
        "ensemble": {
            "type": "object",
            "properties": {
                "variant": {"type": "string"},
                "p": {"type": "number"},
                "values": {"type": "array", "items": {"type": "number"}},
                "probs": {"type": "array", "items": {"type": "number"}},
            },
            "required": ["variant"],
            "additionalProperties": False,
        },
        "dims": {
            "type": "object",
            "properties": {"d": _POSITIVE_INT, "n": _POSITIVE_INT, "K": _POSITIVE_INT, "q": _POSITIVE_INT},
            "additionalProperties": False,
        },
        "trials": _POSITIVE_INT,
        "base_seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "params": {"type": "object"},
        "caps": {
            "type": "object",
            "properties": {"materialize_entries": _POSITIVE_INT, "gram_cols": _POSITIVE_INT, "dense_eig_cols": _POSITIVE_INT},
            "additionalProperties": False,
        },
        "outputs": {"type": "object", "properties": {"dir": {"type": "string"}}, "additionalProperties": False},
    },
    "additionalProperties": False,
}


class ConfigError(ValueError):
    pass


def build_config(kind: str, raw: dict | None = None, seed: int | None = None) -> dict:
    """Validate ``raw`` against the schema and fill in the defaults for ``kind``."""
    raw = {} if raw is None else raw
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {exc.message}") from None
    if raw.get("kind", kind) != kind:
        raise ConfigError(f"config is for kind {raw['kind']!r}, command asked for {kind!r}")
    defaults = DEFAULTS[kind]
    cfg = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "ensemble": raw.get("ensemble", {"variant": "rademacher"}),
        "dims": {"q": 1, **defaults["dims"], **raw.get("dims", {})},
        "trials": raw.get("trials", defaults["trials"]),
        "base_seed": raw.get("base_seed", 0) if seed is None else seed,
        "params": {**copy.deepcopy(defaults["params"]), **raw.get("params", {})},
        "caps": raw.get("caps", {}),
    }
    try:
        EnsembleSpec.from_dict(cfg["ensemble"])
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"ensemble: {exc}") from None
    if kind in ("sweep", "privacy-attack") and cfg["dims"]["K"] >= cfg["dims"]["d"]:
        raise ConfigError("dims: K must be smaller than d for privacy experiments")
    if kind == "sweep" and math.comb(cfg["dims"]["d"] - 1, cfg["dims"]["K"]) < cfg["dims"]["n"]:
        raise ConfigError("dims: C(d-1, K) < n, the attack would be underdetermined")
    return cfg


def _clean(value):
    """JSON-safe copy: non-finite floats become strings, numpy scalars become Python."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if hasattr(value, "item") and not isinstance(value, (str, bytes)):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")
    return value


def _dumps(obj) -> str:
    return json.dumps(_clean(obj), separators=(",", ":"))


def _timed_trial(cfg, t):
    start = time.perf_counter()
    seed, metrics = run_trial(cfg, t)
    return seed, metrics, time.perf_counter() - start


def run(cfg: dict, out_dir: Path, *, deterministic: bool = False, workers: int | None = None, log=sys.stdout) -> int:
    """Run every trial of ``cfg``, write outputs and return the exit status."""
    kind = cfg["kind"]
    workers = int(os.environ.get("ROWPROD_WORKERS", "1")) if workers is None else workers
    if deterministic:
        workers = 1
    trials = range(int(cfg["trials"]))
    started = datetime.now(timezone.utc).isoformat()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_timed_trial, [cfg] * len(trials), trials))
    else:
        results = [_timed_trial(cfg, t) for t in trials]

    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {"ensemble": cfg["ensemble"], "dims": cfg["dims"], "params": cfg["params"]}
    with (out_dir / f"{kind}.jsonl").open("w") as fh:
        for t, (seed, metrics, wall) in zip(trials, results):
            record = {"experiment": kind, "trial": t, "seed": seed, "params": snapshot, "metrics": metrics, "meta": {"wall_seconds": wall}}
            fh.write(_dumps(record) + "\n")

    metrics = [m for _, m, _ in results]
    checks, summary = evaluate(cfg, metrics)
    (out_dir / f"{kind}_summary.csv").write_text(summary_csv(metrics))
    if kind == "sweep":
        (out_dir / "sweep.csv").write_text(sweep_csv(summary["table"]))
    run_doc = {
        "config": cfg,
        "rng": {"name": RNG_NAME, "version": RNG_VERSION},
        "checks": [c.to_dict() for c in checks],
        "summary": summary,
        "meta": {"started": started, "finished": datetime.now(timezone.utc).isoformat(), "workers": workers},
    }
    (out_dir / f"{kind}_run.json").write_text(json.dumps(_clean(run_doc), indent=2) + "\n")

    if "regime" in summary:
        r = summary["regime"]
        print(f"regime: n={r['lhs']} <= c d^K / log_(q) d = {r['rhs']:.6g} -> {r['holds']}", file=log)
    failed = False
    for c in checks:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}", file=log)
        failed |= c.acceptance and not c.passed
    return EXIT_CHECK_FAILED if failed else EXIT_OK


SUMMARY_FIELDS = ("metric", "count", "min", "q10", "q50", "q90", "max", "mean")


def summary_csv(metrics: list[dict]) -> str:
    """Quantile summary of every numeric top-level metric, in first-seen order."""
    names: list[str] = []
    for m in metrics:
        for k, v in m.items():
            if k not in names and isinstance(v, (int, float)) and not isinstance(v, bool):
                names.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for k in names:
        vals = [float(m[k]) for m in metrics if isinstance(m.get(k), (int, float)) and math.isfinite(float(m[k]))]
        s = summarize(vals)
        w.writerow([k, s["count"], *(repr(s.get(f, math.nan)) for f in SUMMARY_FIELDS[2:])])
    return buf.getvalue()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="rowprod", description="Row-product random matrix experiments.")
    parser.add_argument("kind", choices=KINDS)
    parser.add_argument("--config", type=Path, help="JSON experiment config")
    parser.add_argument("--seed", type=int, help="override base_seed")
    parser.add_argument("--trials", type=int, help="override the trial count")
    parser.add_argument("--deterministic", action="store_true", help="sequential execution for reproducible output")
    parser.add_argument("--out", type=Path, help="output directory (default: rowprod-out)")
    args = parser.parse_args(argv)

    try:
        raw = json.loads(args.config.read_text()) if args.config else {}
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        if args.trials is not None:
            raw["trials"] = args.trials
        cfg = build_config(args.kind, raw, args.seed)
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = args.out or Path(raw.get("outputs", {}).get("dir", "rowprod-out"))
    try:
        return run(cfg, out_dir, deterministic=args.deterministic)
    except (CapExceededError, MemoryError) as exc:
        print(f"resource error: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except ConvergenceError as exc:
        print(f"resource error: {exc} (best estimates: lambda_max={exc.lam_max}, lambda_min={exc.lam_min})", file=sys.stderr)
        return EXIT_RESOURCE


if __name__ == "__main__":
    raise SystemExit(main())
