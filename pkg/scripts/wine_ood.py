"""Leave-one-class-out OoD detection on UCI Wine; prints mean ROC-AUC per
(model, score) and per excluded class."""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from uqbench.bayes import VARIANTS
from uqbench.data import export_uci_wine
from uqbench.experiments import ExperimentConfig, run_ood


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--wine-path", help="existing wine CSV; exported from scikit-learn when omitted")
    p.add_argument("--models", default="mc_dropout")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--epochs", type=int, default=100)
    args = p.parse_args(argv)

    wine = args.wine_path or str(export_uci_wine(Path(tempfile.mkdtemp()) / "wine.csv"))
    cfg = ExperimentConfig(wine_path=wine, repetitions=args.reps, base_epochs=args.epochs)
    for model in args.models.split(","):
        if model not in VARIANTS:
            p.error(f"unknown model {model}")
        _, scores = run_ood(cfg, "wine", model)
        keys = ("it_au", "it_eu", "gl_au", "gl_eu")
        print(model, " ".join(f"{k}={np.mean([s.aucs()[k] for s in scores]):.3f}" for k in keys))
        for c in range(3):
            sub = [s for s in scores if s.excluded == c]
            print(f"  class {c} out:", " ".join(f"{k}={np.mean([s.aucs()[k] for s in sub]):.3f}" for k in keys))


if __name__ == "__main__":
    main()
