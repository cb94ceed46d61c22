"""Fixed versus inverse-scaled epochs at a small Two Moons fraction."""

import argparse

from uqbench.experiments import ExperimentConfig, run_underfitting


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--fraction", type=float, default=0.05)
    p.add_argument("--reps", type=int, default=5)
    args = p.parse_args(argv)

    res = run_underfitting(ExperimentConfig(repetitions=args.reps), args.fraction)
    print(f"fixed  ({res.fixed_epochs} epochs): AU {res.fixed_au.round(4).tolist()}")
    print(f"scaled ({res.scaled_epochs} epochs): AU {res.scaled_au.round(4).tolist()}")
    print(f"one-sided paired t-test p = {res.p_value:.3g}")


if __name__ == "__main__":
    main()
