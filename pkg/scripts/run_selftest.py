#!/usr/bin/env python3
"""Run the oracle battery and exit nonzero if any check is red."""

import argparse
import sys

from phckit.oracles import format_selftest, selftest


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--skip-fdtd", action="store_true",
                    help="analytic checks only (fast)")
    args = ap.parse_args()
    results = selftest(include_fdtd=not args.skip_fdtd)
    print(format_selftest(results))
    return 0 if all(r.passed for r in results) else 2


if __name__ == "__main__":
    sys.exit(main())
