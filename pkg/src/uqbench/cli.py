"""Command-line entry point.

    uqbench run {dataset-size,label-noise,ood,all} [--config FILE] [flags]
    uqbench grid [--config FILE] [flags]
    uqbench report RUN_ROOT
    uqbench export-wine PATH

Config files are ``key = value`` lines under ``[section]`` headers; flags
override file values. Every run writes ``manifest.ini`` in the same format,
which replays the run when passed back through ``--config``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or schema error,
3 partial failure (some jobs failed, outputs written for the rest).
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .bayes import VARIANTS, build_model, train_stochastic
from .core import TrainConfig
from .data import ParseError, SchemaError, export_uci_wine
from .experiments import (
    ESTIMATOR_HEADS,
    FAMILIES,
    ConfigError,
    ExperimentConfig,
    default_bounds,
    derive_seed,
    make_split,
    model_spec,
    run_dataset_size,
    run_label_noise,
    run_ood,
    uncertainty_grid,
    write_grid,
    write_per_sample,
    write_runs,
)
from .metrics import (
    OOD_COLUMNS,
    leaderboard,
    ood_rows,
    pcc_rows,
    read_pcc,
    write_leaderboard,
    write_pcc,
    write_table,
)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2, 3


class ConfigFileError(ValueError):
    def __init__(self, path, line: int | None, message: str):
        self.path, self.line, self.message = path, line, message
        where = f"{path}:{line}" if line else str(path)
        super().__init__(f"{where}: {message}")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.replace(" ", "").split(",") if v)


def _names(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# section -> key -> (Config attribute, parser)
SCHEMA = {
    "data": {
        "dataset": ("dataset", str),
        "wine_path": ("wine_path", str),
        "n_train": ("n_train", int),
        "n_test": ("n_test", int),
        "noise_sd": ("noise_sd", float),
    },
    "model": {
        "models": ("models", _names),
        "estimators": ("estimators", _names),
        "dropout_p": ("dropout_p", float),
        "ensemble_size": ("ensemble_size", int),
        "gl_train_draws": ("gl_train_draws", int),
    },
    "experiment": {
        "fractions": ("fractions", _floats),
        "noise_levels": ("noise_levels", _floats),
        "epochs": ("base_epochs", int),
        "reps": ("repetitions", int),
        "seed": ("master_seed", int),
        "t_passes": ("passes", int),
        "n_eval": ("n_eval", int),
        "batch_size": ("batch_size", int),
        "learning_rate": ("learning_rate", float),
        "epoch_cap": ("epoch_cap", int),
    },
    "output": {
        "out": ("out", str),
        "jobs": ("jobs", int),
        "dump_per_sample": ("dump_per_sample", _bool),
    },
}


@dataclass
class Config:
    dataset: str = "two_moons"
    models: tuple[str, ...] = ("mc_dropout",)
    estimators: tuple[str, ...] = ("it", "gl")
    out: str = "runs"
    fractions: tuple[float, ...] = ExperimentConfig.fractions
    noise_levels: tuple[float, ...] = ExperimentConfig.noise_levels
    base_epochs: int = 100
    repetitions: int = 5
    passes: int = 50
    n_eval: int = 1000
    master_seed: int = 0
    batch_size: int = 0
    learning_rate: float = 1e-3
    epoch_cap: int = 100
    dropout_p: float = 0.3
    ensemble_size: int = 10
    gl_train_draws: int = 32
    n_train: int = 1000
    n_test: int = 1000
    noise_sd: float = 0.1
    wine_path: str = ""
    jobs: int = 1
    dump_per_sample: bool = False
    origin: dict = field(default_factory=dict, repr=False)  # attribute -> "file:line" or "--flag"

    def validate(self) -> None:
        def fail(attr, msg):
            raise ConfigFileError(self.origin.get(attr, "<config>"), None, msg)

        if self.dataset not in FAMILIES:
            fail("dataset", f"unknown dataset {self.dataset!r}; choose from {', '.join(FAMILIES)}")
        for m in self.models:
            if m not in VARIANTS:
                fail("models", f"unknown model {m!r}; choose from {', '.join(VARIANTS)}")
        for e in self.estimators:
            if e not in ESTIMATOR_HEADS:
                fail("estimators", f"unknown estimator {e!r}")
        if not self.models:
            fail("models", "no models selected")

    def experiment_config(self) -> ExperimentConfig:
        return ExperimentConfig(
            fractions=self.fractions,
            noise_levels=self.noise_levels,
            base_epochs=self.base_epochs,
            repetitions=self.repetitions,
            passes=self.passes,
            n_eval=self.n_eval,
            master_seed=self.master_seed,
            estimators=self.estimators,
            batch_size=self.batch_size or None,
            learning_rate=self.learning_rate,
            epoch_cap=self.epoch_cap,
            dropout_p=self.dropout_p,
            ensemble_size=self.ensemble_size,
            gl_train_draws=self.gl_train_draws,
            n_train=self.n_train,
            n_test=self.n_test,
            noise_sd=self.noise_sd,
            wine_path=self.wine_path or None,
            dump_per_sample=self.dump_per_sample,
            jobs=self.jobs,
        )


def read_config(path: str | Path, cfg: Config | None = None) -> Config:
    cfg = cfg or Config()
    path = Path(path)
    if not path.is_file():
        raise ConfigFileError(path, None, "config file not found")
    section = None
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA and section != "meta":
                raise ConfigFileError(path, lineno, f"unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigFileError(path, lineno, "expected 'key = value'")
        if section is None:
            raise ConfigFileError(path, lineno, "key outside of a [section]")
        key, value = (s.strip() for s in line.split("=", 1))
        if section == "meta":
            continue
        if key not in SCHEMA[section]:
            raise ConfigFileError(path, lineno, f"unknown key {key!r} in [{section}]")
        attr, parse = SCHEMA[section][key]
        try:
            setattr(cfg, attr, parse(value))
        except ValueError as exc:
            raise ConfigFileError(path, lineno, f"bad value for {key}: {exc}") from None
        cfg.origin[attr] = f"{path}:{lineno}"
    return cfg


def format_config(cfg: Config, meta: dict | None = None) -> str:
    def show(v):
        if isinstance(v, tuple):
            return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        if isinstance(v, bool):
            return "true" if v else "false"
        return repr(v) if isinstance(v, float) else str(v)

    lines = []
    if meta:
        lines.append("[meta]")
        lines += [f"{k} = {v}" for k, v in meta.items()]
        lines.append("")
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (attr, _) in keys.items():
            lines.append(f"{key} = {show(getattr(cfg, attr))}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------

FLAG_ATTRS = {
    "dataset": ("dataset", str),
    "model": ("models", _names),
    "estimator": ("estimators", lambda s: ("it", "gl") if s == "both" else (s,)),
    "fractions": ("fractions", _floats),
    "noise_levels": ("noise_levels", _floats),
    "reps": ("repetitions", int),
    "seed": ("master_seed", int),
    "epochs": ("base_epochs", int),
    "t_passes": ("passes", int),
    "n_eval": ("n_eval", int),
    "out": ("out", str),
    "jobs": ("jobs", int),
    "wine_path": ("wine_path", str),
    "batch_size": ("batch_size", int),
    "n_train": ("n_train", int),
    "n_test": ("n_test", int),
    "ensemble_size": ("ensemble_size", int),
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file with [section] headers")
    p.add_argument("--dataset", choices=FAMILIES)
    p.add_argument("--model", help=f"comma-separated subset of {', '.join(VARIANTS)}")
    p.add_argument("--estimator", choices=("it", "gl", "both"))
    p.add_argument("--fractions", help="comma-separated training fractions")
    p.add_argument("--noise-levels", help="comma-separated label-shuffle fractions")
    p.add_argument("--reps", help="repetitions per condition")
    p.add_argument("--seed", help="master seed")
    p.add_argument("--epochs", help="base epochs (flipout trains 5x)")
    p.add_argument("--t-passes", help="stochastic forward passes")
    p.add_argument("--n-eval", help="sampled-softmax draws at evaluation")
    p.add_argument("--batch-size")
    p.add_argument("--n-train")
    p.add_argument("--n-test")
    p.add_argument("--ensemble-size")
    p.add_argument("--wine-path", help="UCI wine CSV (class label first, no header)")
    p.add_argument("--out", help="output root")
    p.add_argument("--jobs", help="worker processes")
    p.add_argument("--dump-per-sample", action="store_true")
    p.add_argument("--overwrite", action="store_true", help="write into --out instead of a new timestamped subdirectory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uqbench", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run benchmark experiments")
    run.add_argument("experiment", choices=("dataset-size", "label-noise", "ood", "all"))
    _add_common(run)
    grid = sub.add_parser("grid", help="uncertainty over a 2-D feature space")
    _add_common(grid)
    grid.add_argument("--bounds", help="x0,x1,y0,y1 (default: data box plus 50%% margin)")
    grid.add_argument("--resolution", type=int, default=100)
    report = sub.add_parser("report", help="Disentanglement Error leaderboard for a run root")
    report.add_argument("root")
    export = sub.add_parser("export-wine", help="write the UCI wine CSV from scikit-learn's bundled copy")
    export.add_argument("path")
    return parser


def resolve_config(args: argparse.Namespace) -> Config:
    cfg = read_config(args.config) if args.config else Config()
    for flag, (attr, parse) in FLAG_ATTRS.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        try:
            setattr(cfg, attr, parse(value))
        except ValueError as exc:
            raise ConfigFileError(f"--{flag.replace('_', '-')}", None, str(exc)) from None
        cfg.origin[attr] = f"--{flag.replace('_', '-')}"
    if getattr(args, "dump_per_sample", False):
        cfg.dump_per_sample = True
    cfg.validate()
    return cfg


def make_run_root(out: str, overwrite: bool) -> Path:
    base = Path(out)
    if overwrite:
        base.mkdir(parents=True, exist_ok=True)
        return base
    stamp = time.strftime("%Y%m%d-%H%M%S")
    root = base / f"run-{stamp}"
    n = 1
    while root.exists():
        n += 1
        root = base / f"run-{stamp}-{n}"
    root.mkdir(parents=True)
    return root


def _manifest_meta() -> dict:
    return {"uqbench": __version__, "numpy": np.__version__, "python": sys.version.split()[0]}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    ecfg = cfg.experiment_config()
    # surface missing/malformed wine data before any training
    make_split(cfg.dataset, ecfg, 0)
    root = make_run_root(cfg.out, args.overwrite)
    (root / "manifest.ini").write_text(format_config(cfg, _manifest_meta()))
    kinds = ("dataset-size", "label-noise", "ood") if args.experiment == "all" else (args.experiment,)
    n_failed = n_total = 0
    for kind in kinds:
        out_dir = root / kind
        if kind == "ood":
            if make_split(cfg.dataset, ecfg, 0).train.class_count < 3:
                if args.experiment == "all":
                    print(f"skipping ood: {cfg.dataset} has fewer than 3 classes", file=sys.stderr)
                    continue
                raise ConfigError(f"ood needs a dataset with at least 3 classes; {cfg.dataset} has 2")
            out_dir.mkdir(exist_ok=True)
            records, scores = run_ood(ecfg, cfg.dataset, cfg.models)
            write_table(out_dir / "ood_auc.csv", OOD_COLUMNS, ood_rows(scores))
        else:
            out_dir.mkdir(exist_ok=True)
            runner = run_dataset_size if kind == "dataset-size" else run_label_noise
            records = runner(ecfg, cfg.dataset, cfg.models)
            write_pcc(pcc_rows(records, cfg.estimators), out_dir / "pcc.csv")
        write_runs(records, out_dir / "runs.csv")
        if cfg.dump_per_sample:
            write_per_sample(records, out_dir / "per_sample")
        n_total += len(records)
        n_failed += sum(r.failed for r in records)
        print(f"{kind}: {len(records)} runs -> {out_dir}")
    if {"dataset-size", "label-noise"} <= set(kinds):
        _report(root, quiet=True)
    print(root)
    if n_total and n_failed == n_total:
        print("all runs failed", file=sys.stderr)
        return EXIT_RUNTIME
    if n_failed:
        print(f"{n_failed} of {n_total} runs failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = resolve_config(args)
    ecfg = cfg.experiment_config()
    split = make_split(cfg.dataset, ecfg, 0)
    if split.train.n_features != 2:
        raise ConfigError(f"grid needs a 2-D dataset; {cfg.dataset} has {split.train.n_features} features")
    if args.bounds:
        bounds = _floats(args.bounds)
        if len(bounds) != 4:
            raise ConfigError("--bounds needs x0,x1,y0,y1")
    else:
        bounds = default_bounds(split.train.features)
    root = make_run_root(cfg.out, args.overwrite)
    (root / "manifest.ini").write_text(format_config(cfg, dict(_manifest_meta(), bounds=",".join(map(repr, bounds)),
                                                                resolution=args.resolution)))
    for variant in cfg.models:
        for est in cfg.estimators:
            spec = model_spec(cfg.dataset, variant, ESTIMATOR_HEADS[est], ecfg)
            seed = derive_seed(cfg.master_seed, "grid", cfg.dataset, variant, est)
            model = build_model(spec, seed)
            train_stochastic(model, split.train.features, split.train.labels,
                             TrainConfig(cfg.base_epochs, ecfg.batch_for(cfg.dataset), cfg.learning_rate, seed))
            grid = uncertainty_grid(model, bounds, args.resolution, cfg.passes, cfg.n_eval, derive_seed(seed, "eval"))
            for path in write_grid(grid, root, prefix=f"{variant}_"):
                print(path)
    return EXIT_OK


def _report(root: Path, quiet: bool = False) -> list:
    sources = {"dataset-size": root / "dataset-size" / "pcc.csv", "label-noise": root / "label-noise" / "pcc.csv"}
    if not root.is_dir():
        raise ConfigError(f"run root {root} does not exist")
    missing = [k for k, p in sources.items() if not p.is_file()]
    if len(missing) == 2:
        raise ConfigError(f"{root}: no experiment outputs found; run 'uqbench run dataset-size' and 'uqbench run label-noise' first")
    if missing:
        raise ConfigError(f"{root}: missing {missing[0]} results; run 'uqbench run {missing[0]}' into this root first")
    rows = []
    for path in sources.values():
        try:
            rows += read_pcc(path)
        except ValueError as exc:
            raise SchemaError(str(exc)) from None
    board = leaderboard(rows)
    write_leaderboard(board, root / "de_leaderboard.csv")
    lines = [f"{'dataset':<14}{'model':<16}{'est':<5}{'DE mean':>9}{'DE sum':>9}{'ci95':>9}  rank"]
    for r in board:
        ci = "" if r.ci95 is None else f"{r.ci95:.3f}"
        lines.append(f"{r.dataset:<14}{r.model:<16}{r.estimator:<5}{r.de_mean:9.3f}{r.de_sum:9.3f}{ci:>9}  {r.rank}")
    text = "\n".join(lines) + "\n"
    (root / "report.txt").write_text(text)
    if any(r.n_reps < 2 for r in board):
        print("warning: single repetition for some rows; ci95 left empty", file=sys.stderr)
    if not quiet:
        print(text, end="")
    return board


def cmd_report(args) -> int:
    _report(Path(args.root))
    return EXIT_OK


def cmd_export_wine(args) -> int:
    print(export_uci_wine(args.path))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "grid": cmd_grid, "report": cmd_report, "export-wine": cmd_export_wine}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigFileError, ConfigError, SchemaError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level guard maps to exit status
        print(f"runtime failure: {exc!r}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
