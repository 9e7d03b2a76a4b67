#!/usr/bin/env python3
"""Run the canonical desk-scale cavity suite and write the markdown
trend report (index-step sweeps at m=4/6, length detuning, gradual
staircase vs matched single step)."""

import argparse
import sys
from pathlib import Path

from phckit.experiment import run_replicate


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("replicate_out"))
    ap.add_argument("--resolution", type=int, default=16,
                    help="grid cells per lattice period")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--mode", choices=("full", "quick"), default="full",
                    help="quick truncates every axis to a smoke subset")
    args = ap.parse_args()
    report = run_replicate(args.out, resolution=args.resolution,
                           workers=args.workers, report_mode=args.mode)
    print(f"report: {report}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
