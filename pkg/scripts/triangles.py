"""MC-Dropout + IT on the triangles data: EU in the empty bands left and
right of the data, AU across x-bins, and PGM heat maps of one repetition."""

import argparse
from pathlib import Path

import numpy as np

from uqbench.experiments import ExperimentConfig, run_triangles, write_grid


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--resolution", type=int, default=41)
    p.add_argument("--out", default="runs/triangles")
    args = p.parse_args(argv)

    res = run_triangles(ExperimentConfig(repetitions=args.reps), resolution=args.resolution)
    print(f"EU left {res.left_eu:.4f}  right {res.right_eu:.4f}  ratio {res.eu_ratio:.2f}")
    print("AU per x-bin", np.round(res.bin_au, 4).tolist(), f"spearman {res.spearman:.2f}")
    for path in write_grid(res.grids[0], Path(args.out)):
        print(path)


if __name__ == "__main__":
    main()
