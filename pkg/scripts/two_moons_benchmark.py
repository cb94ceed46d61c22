"""Dataset-size and label-noise sweeps on Two Moons for every model, then
the Disentanglement Error leaderboard.

    python3 scripts/two_moons_benchmark.py --out runs/two_moons --reps 5
"""

import argparse
import sys

from uqbench.bayes import VARIANTS
from uqbench.cli import main


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/two_moons")
    p.add_argument("--reps", default="5")
    p.add_argument("--epochs", default="100")
    p.add_argument("--models", default=",".join(VARIANTS))
    p.add_argument("--jobs", default="1")
    return p.parse_args(argv)


if __name__ == "__main__":
    a = parse_args()
    sys.exit(main(["run", "all", "--dataset", "two_moons", "--model", a.models, "--reps", a.reps,
                   "--epochs", a.epochs, "--jobs", a.jobs, "--out", a.out]))
