#!/usr/bin/env python3
"""Library-level example: sweep the heterostructure index step delta_n
for one cavity length and plot Q, without a config file."""

import argparse
import sys
from pathlib import Path

import numpy as np

from phckit.experiment import (ExperimentConfig, default_background_index,
                               run_sweep)
from phckit.geometry import LatticeSpec, StepProfile


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("dn_sweep_out"))
    ap.add_argument("--m", type=int, default=4, help="cavity length, periods")
    ap.add_argument("--resolution", type=int, default=16)
    ap.add_argument("--points", type=int, default=5,
                    help="number of delta_n values in [0.01, 0.03]")
    args = ap.parse_args()

    lattice = LatticeSpec(periods_x=args.m + 17, periods_z=13)
    n0 = default_background_index(lattice)
    cfg = ExperimentConfig(
        lattice=lattice,
        profile=StepProfile(n_center=n0, m=args.m),
        resolution=args.resolution,
        delta_n=tuple(np.linspace(0.01, 0.03, args.points)),
        out_dir=args.out,
    )
    outcome = run_sweep(cfg)
    n_bad = sum(bool(r.error) for r in outcome.rows)
    for r in outcome.rows:
        flag = "ok" if r.converged else (r.error or "not converged")
        print(f"delta_n={r.value}: f={r.freq_norm:.5f} Q={r.q:.4g} [{flag}]")
    print(f"wrote {outcome.csv_path} and {outcome.svg_path}")
    return 0 if n_bad == 0 else 2


if __name__ == "__main__":
    sys.exit(main())
