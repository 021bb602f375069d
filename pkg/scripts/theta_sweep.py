"""Marginal excursion effect of A_2 across the randomization probability.

Writes closed form, oracle and estimate per theta; the sign flips at 1/(1+e).

    python3 scripts/theta_sweep.py --n 20000 --threads 4 --out theta_sweep.csv
"""

from __future__ import annotations

import argparse
import sys

from excursion.cli import main


def run() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None)
    args = p.parse_args()
    argv = ["sweep-theta", "--n", str(args.n), "--seed", str(args.seed), "--threads", str(args.threads)]
    if args.out:
        argv += ["--out", args.out]
    return main(argv)


if __name__ == "__main__":
    sys.exit(run())
