#!/usr/bin/env python3
"""Failure rate of the cruise controller over sampling times and exploration policies.

Writes the sweep table to ``<out>/cruise_sweep.csv`` and prints it.
"""
import argparse
import sys
from pathlib import Path

from cbfbandit.config import load_config
from cbfbandit.sim import build_scenario, run_failure_sweep, sweep_table_csv

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "cruise.yaml"))
    ap.add_argument("--trials", type=int, default=50)
    ap.add_argument("--dts", type=float, nargs="+", default=[1e-1, 1e-2, 1e-3])
    ap.add_argument("--out", default=str(ROOT / "out"))
    args = ap.parse_args()

    scn = build_scenario(load_config(args.config))
    rows, _ = run_failure_sweep(scn, dts=args.dts, trials=args.trials)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(sweep_table_csv(rows, out / "cruise_sweep.csv"), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
