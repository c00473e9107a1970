"""Pilot-calibrated constants for the Monte Carlo regressions.

The bounds being tested hold up to unspecified constants. Each constant here
is fixed by a pilot run at one reference configuration: upper-bound constants
are 1.5 times the largest pilot observation, lower-bound constants 0.5 times
the smallest. The frozen values live in ``data/calibration.json`` together with
the pilot configuration that produced them. Regenerate with::

    python -m rowprod.calibration --write
"""

from __future__ import annotations

import argparse
import functools
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

__all__ = ["CalibratedEntry", "CalibratedConstants", "PILOTS", "PILOT_SEED", "load_calibration", "run_pilot"]

PILOT_SEED = 0x9E3779B97F4A7C15
PILOT_TRIALS = 50

RADEMACHER = {"variant": "rademacher"}

# name -> (kind, dims, params, metric, reducer, multiplier, params that must match)
PILOTS = {
    "C_norm": ("spectrum", (64, 512, 2), {}, "norm_ratio", "max", 1.5, []),
    "c_sn": ("spectrum", (64, 512, 2), {}, "sn_ratio", "min", 0.5, []),
    "C_2": (
        "spectrum",
        (16, 128, 2),
        {"subset_sizes": [1, 2, 4, 8, 16, 32, 64, 128], "subset_samples": 50},
        "subset_max_ratio",
        "max",
        1.5,
        [],
    ),
    "c_tilde": ("qnorm", (32, 64, 1), {"directions": 100}, "min_ratio", "min", 0.5, []),
    "c_l1": ("l1probe", (16, 48, 2), {"restarts": 50, "steps": 2000}, "ratio", "min", 0.5, ["restarts", "steps"]),
    "C_kashin": (
        "kashin",
        (16, 48, 2),
        {"images": 200, "restarts": 50, "steps": 2000},
        "max_equivalence_ratio",
        "max",
        1.5,
        ["restarts", "steps"],
    ),
}


@dataclass(frozen=True)
class CalibratedEntry:
    value: float
    provenance: dict


class CalibratedConstants:
    def __init__(self, entries: dict[str, CalibratedEntry]):
        for name, e in entries.items():
            if not (e.value > 0 and math.isfinite(e.value)):
                raise ValueError(f"calibrated constant {name} must be positive, got {e.value}")
            if not e.provenance:
                raise ValueError(f"calibrated constant {name} has no provenance")
        self.entries = dict(entries)

    def entry(self, name: str) -> CalibratedEntry | None:
        return self.entries.get(name)

    def value(self, name: str) -> float:
        return self.entries[name].value

    @property
    def C_k(self) -> dict[int, float]:
        return {int(k[2:]): e.value for k, e in self.entries.items() if k.startswith("C_") and k[2:].isdigit()}

    def to_json(self) -> str:
        return json.dumps(
            {"version": 1, "constants": {k: {"value": e.value, "provenance": e.provenance} for k, e in self.entries.items()}},
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "CalibratedConstants":
        obj = json.loads(text)
        return cls({k: CalibratedEntry(v["value"], v["provenance"]) for k, v in obj["constants"].items()})


@functools.lru_cache(maxsize=1)
def load_calibration() -> CalibratedConstants:
    text = resources.files("rowprod").joinpath("data/calibration.json").read_text()
    return CalibratedConstants.from_json(text)


def pilot_config(name: str, trials: int = PILOT_TRIALS, base_seed: int = PILOT_SEED) -> dict:
    kind, (d, n, K), params, *_ = PILOTS[name]
    return {
        "schema_version": 1,
        "kind": kind,
        "ensemble": dict(RADEMACHER),
        "dims": {"d": d, "n": n, "K": K, "q": 1},
        "trials": trials,
        "base_seed": base_seed,
        "params": dict(params),
        "caps": {},
    }


def run_pilot(name: str, trials: int = PILOT_TRIALS, base_seed: int = PILOT_SEED, cache: dict | None = None) -> CalibratedEntry:
    """Run the pilot for ``name`` and return the frozen constant with provenance."""
    from .experiments import run_trial

    kind, (d, n, K), params, metric, reducer, mult, match = PILOTS[name]
    cfg = pilot_config(name, trials, base_seed)
    key = json.dumps(cfg, sort_keys=True)
    if cache is not None and key in cache:
        metrics = cache[key]
    else:
        metrics = [run_trial(cfg, t)[1] for t in range(trials)]
        if cache is not None:
            cache[key] = metrics
    observed = [m[metric] for m in metrics]
    extreme = max(observed) if reducer == "max" else min(observed)
    return CalibratedEntry(
        value=mult * extreme,
        provenance={
            "config": {"kind": kind, "ensemble": dict(RADEMACHER), "d": d, "n": n, "K": K, "params": params, "match_params": match},
            "trials": trials,
            "base_seed": base_seed,
            "metric": metric,
            "statistic": reducer,
            "observed": extreme,
            "multiplier": mult,
        },
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Run pilot calibrations.")
    parser.add_argument("--write", action="store_true", help="overwrite the packaged calibration.json")
    parser.add_argument("--trials", type=int, default=PILOT_TRIALS)
    args = parser.parse_args(argv)
    cache: dict = {}
    entries = {}
    for name in PILOTS:
        entries[name] = run_pilot(name, args.trials, cache=cache)
        e = entries[name]
        print(f"{name}: {e.value:.6g} ({e.provenance['statistic']} {e.provenance['observed']:.6g} x {e.provenance['multiplier']})")
    text = CalibratedConstants(entries).to_json()
    if args.write:
        path = Path(__file__).with_name("data") / "calibration.json"
        path.write_text(text + "\n")
        load_calibration.cache_clear()
        print(f"wrote {path}")
    else:
        print(text)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
