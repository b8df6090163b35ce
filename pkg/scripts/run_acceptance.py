#!/usr/bin/env python3
"""Run the acceptance suite and print one line per criterion.

    python3 scripts/run_acceptance.py           # everything (about 25 minutes)
    python3 scripts/run_acceptance.py --fast    # skip the simulation criteria 5 to 7
"""
import argparse
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fast", action="store_true", help="deselect the slow simulation criteria")
    args = ap.parse_args()
    cmd = [sys.executable, "-m", "pytest", "-q", str(ROOT / "tests" / "test_acceptance.py")]
    if args.fast:
        cmd += ["-m", "not slow"]
    code = subprocess.call(cmd, cwd=ROOT)
    report = ROOT / "out" / "acceptance.txt"
    if report.exists():
        print(report.read_text(), end="")
    return code


if __name__ == "__main__":
    sys.exit(main())
