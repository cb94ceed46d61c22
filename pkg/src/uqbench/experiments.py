"""The three benchmark experiments plus the triangles and underfitting studies.

A run is a set of independent jobs, one per (condition, repetition, model
variant). Every random stream in a job is derived from the master seed and
the job's coordinates, so jobs can run in any order or in parallel, and adding
a condition never shifts the streams of the others.
"""

from __future__ import annotations

import csv
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .bayes import ModelSpec, StochasticModel, build_model, train_stochastic
from .core import TrainConfig, TrainingError, softmax
from .data import (
    Dataset,
    Split,
    id_label_map,
    leave_one_class_out,
    load_wine,
    shuffle_labels,
    stratified_subsample,
    triangles,
    two_moons,
)
from .disentangle import GaussianLogitSamples, gl_predictive, gl_uncertainties, it_disentangle
from .metrics import roc_auc

FAMILIES = ("two_moons", "triangles", "wine")
EXPERIMENTS = ("dataset-size", "label-noise", "ood")
ESTIMATOR_HEADS = {"it": "softmax", "gl": "gaussian"}

DEFAULT_FRACTIONS = (0.01, 0.05, 0.10, 0.25, 0.50, 0.75, 1.00)
DEFAULT_NOISE = tuple(round(0.1 * i, 1) for i in range(11))


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    noise_levels: tuple[float, ...] = DEFAULT_NOISE
    base_epochs: int = 100
    repetitions: int = 5
    passes: int = 50
    n_eval: int = 1000
    master_seed: int = 0
    estimators: tuple[str, ...] = ("it", "gl")
    batch_size: int | None = None  # None: 128 for wine, 32 otherwise
    learning_rate: float = 1e-3
    epoch_cap: int = 100  # dataset-size epochs never exceed cap * base_epochs
    dropout_p: float = 0.3
    ensemble_size: int = 10
    gl_train_draws: int = 32
    n_train: int = 1000
    n_test: int = 1000
    noise_sd: float = 0.1
    wine_path: str | None = None
    dump_per_sample: bool = False
    jobs: int = 1

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        self.noise_levels = tuple(float(v) for v in self.noise_levels)
        self.estimators = tuple(self.estimators)
        if not self.fractions or any(not 0.0 < f <= 1.0 for f in self.fractions):
            raise ConfigError("fractions must lie in (0, 1]")
        if not self.noise_levels or any(not 0.0 <= v <= 1.0 for v in self.noise_levels):
            raise ConfigError("noise levels must lie in [0, 1]")
        if self.repetitions < 1 or self.passes < 1 or self.n_eval < 1 or self.base_epochs < 1:
            raise ConfigError("repetitions, passes, n_eval and base_epochs must be >= 1")
        if not self.estimators or any(e not in ESTIMATOR_HEADS for e in self.estimators):
            raise ConfigError(f"estimators must be drawn from {tuple(ESTIMATOR_HEADS)}")

    def batch_for(self, family: str) -> int:
        if self.batch_size:
            return self.batch_size
        return 128 if family == "wine" else 32


# ---------------------------------------------------------------------------
# Seeds
# ---------------------------------------------------------------------------


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    if isinstance(part, float):
        return int(round(part * 1_000_000))
    return int(part)


def derive_seed(master: int, *parts) -> int:
    """Deterministic 63-bit seed for the stream named by ``parts``."""
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(_key(p) for p in parts))
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


# ---------------------------------------------------------------------------
# Datasets and models per family
# ---------------------------------------------------------------------------


def make_split(family: str, cfg: ExperimentConfig, rep: int) -> Split:
    """Base train/test data for one repetition (shared by all conditions)."""
    seed = derive_seed(cfg.master_seed, "data", family, rep)
    if family == "two_moons":
        return Split(
            two_moons(cfg.n_train, cfg.noise_sd, derive_seed(seed, "train")),
            two_moons(cfg.n_test, cfg.noise_sd, derive_seed(seed, "test")),
        )
    if family == "triangles":
        return Split(triangles(cfg.n_train, derive_seed(seed, "train")), triangles(cfg.n_test, derive_seed(seed, "test")))
    if family == "wine":
        if not cfg.wine_path:
            raise ConfigError("the wine family needs wine_path")
        return load_wine(cfg.wine_path, derive_seed(seed, "split"))
    raise ConfigError(f"unknown dataset {family!r}; choose from {FAMILIES}")


def model_spec(family: str, variant: str, head: str, cfg: ExperimentConfig, class_count: int | None = None) -> ModelSpec:
    """2x32x32xC with both hidden layers stochastic for the 2-D toys;
    13x32x32x16xC with the 16-unit layer stochastic for wine."""
    if family == "wine":
        sizes, bayes_hidden = [13, 32, 32, 16, 3], (2,)
    elif family in ("two_moons", "triangles"):
        sizes, bayes_hidden = [2, 32, 32, 2], (0, 1)
    else:
        raise ConfigError(f"unknown dataset {family!r}")
    if class_count is not None:
        sizes[-1] = class_count
    return ModelSpec(
        variant,
        sizes,
        head=head,
        p=cfg.dropout_p,
        ensemble_size=cfg.ensemble_size,
        passes=cfg.passes,
        bayes_hidden=bayes_hidden,
        gl_train_draws=cfg.gl_train_draws,
    )


def scaled_epochs(base_epochs: int, fraction: float, cap: int = 100) -> int:
    """Epochs inversely proportional to the data fraction, rounded half-up."""
    return min(int(math.floor(base_epochs / fraction + 0.5)), cap * base_epochs)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class Evaluation:
    predictions: np.ndarray
    au: np.ndarray
    eu: np.ndarray
    passes: np.ndarray | None = None

    def accuracy(self, labels: np.ndarray) -> float:
        return float(np.mean(self.predictions == np.asarray(labels)))


def evaluate(model: StochasticModel, x: np.ndarray, passes: int, n_eval: int, rng, keep_passes: bool = False) -> Evaluation:
    """Per-sample AU/EU with the estimator matching the model's head.

    Prediction is the argmax of the mean class probability across passes.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    out = model.predict_T(x, passes, rng)
    if model.spec.head == "softmax":
        probs = softmax(out)
        u = it_disentangle(probs)
        return Evaluation(probs.mean(axis=0).argmax(axis=1), u.aleatoric, u.epistemic, out if keep_passes else None)
    samples = GaussianLogitSamples.from_head(out)
    au, eu = gl_uncertainties(samples, n_eval, rng)
    return Evaluation(gl_predictive(samples).argmax(axis=1), au, eu, out if keep_passes else None)


def train_and_evaluate(
    spec: ModelSpec,
    train: Dataset,
    x_test: np.ndarray,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    train_seed: int,
    eval_seed: int,
    cfg: ExperimentConfig,
) -> tuple[StochasticModel, Evaluation]:
    model = build_model(spec, train_seed)
    train_stochastic(model, train.features, train.labels, TrainConfig(epochs, batch_size, learning_rate, train_seed))
    return model, evaluate(model, x_test, cfg.passes, cfg.n_eval, eval_seed)


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

RUN_COLUMNS = (
    "experiment", "dataset", "model", "condition", "rep", "seed",
    "accuracy", "it_au", "it_eu", "gl_au", "gl_eu",
    "gl_accuracy", "clean_accuracy", "epochs", "status",
)


@dataclass
class RunRecord:
    experiment: str
    dataset: str
    model: str
    condition: float
    rep: int
    seed: int
    accuracy: float | None = None
    it_au: float | None = None
    it_eu: float | None = None
    gl_au: float | None = None
    gl_eu: float | None = None
    gl_accuracy: float | None = None
    clean_accuracy: float | None = None
    epochs: int = 0
    status: str = "ok"
    provenance: tuple = ()
    per_sample: dict = field(default_factory=dict, repr=False)
    ood_mask: np.ndarray | None = field(default=None, repr=False)

    @property
    def failed(self) -> bool:
        return self.status != "ok"

    def row(self) -> list:
        return [_fmt(getattr(self, c)) for c in RUN_COLUMNS]

    def estimator_accuracy(self, estimator: str) -> float | None:
        return self.accuracy if estimator == "it" else self.gl_accuracy


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class Job:
    experiment: str
    family: str
    variant: str
    condition: float
    rep: int
    cfg: ExperimentConfig


def _fill(record: RunRecord, estimator: str, ev: Evaluation, labels, clean, acc_mask, cfg) -> None:
    """Store test-set means; accuracy only counts rows in ``acc_mask``."""
    acc = float(np.mean(ev.predictions[acc_mask] == labels[acc_mask]))
    setattr(record, f"{estimator}_au", float(ev.au.mean()))
    setattr(record, f"{estimator}_eu", float(ev.eu.mean()))
    if estimator == "it":
        record.accuracy = acc
        if clean is not None:
            record.clean_accuracy = ev.accuracy(clean)
    else:
        record.gl_accuracy = acc
        if record.accuracy is None and clean is not None:
            record.clean_accuracy = ev.accuracy(clean)
    if cfg.dump_per_sample:
        record.per_sample[f"{estimator}_au"] = ev.au
        record.per_sample[f"{estimator}_eu"] = ev.eu


def run_job(job: Job) -> RunRecord:
    cfg = job.cfg
    seed = derive_seed(cfg.master_seed, job.experiment, job.family, job.variant, job.condition, job.rep)
    record = RunRecord(job.experiment, job.family, job.variant, job.condition, job.rep, seed)
    base = make_split(job.family, cfg, job.rep)
    data_seed = derive_seed(cfg.master_seed, job.experiment, job.family, job.condition, job.rep)
    clean = None
    test = base.test
    epochs = cfg.base_epochs
    class_count = None
    eval_mask = np.ones(len(test), dtype=bool)
    if job.experiment == "dataset-size":
        train = stratified_subsample(base.train, job.condition, derive_seed(data_seed, "subsample"))
        epochs = scaled_epochs(cfg.base_epochs, job.condition, cfg.epoch_cap)
        labels = test.labels
    elif job.experiment == "label-noise":
        train = shuffle_labels(base.train, job.condition, derive_seed(data_seed, "train-shuffle"))
        test = shuffle_labels(base.test, job.condition, derive_seed(data_seed, "test-shuffle"))
        clean = base.test.labels
        labels = test.labels
    elif job.experiment == "ood":
        excluded = int(job.condition)
        train, test, ood = leave_one_class_out(base, excluded)
        class_count = train.class_count
        eval_mask = ~ood
        labels = id_label_map(base.train.class_count, excluded)[test.labels]
        record.ood_mask = ood
    else:
        raise ConfigError(f"unknown experiment {job.experiment!r}")
    record.epochs = epochs
    record.provenance = train.provenance
    batch = cfg.batch_for(job.family)
    try:
        for estimator in cfg.estimators:
            spec = model_spec(job.family, job.variant, ESTIMATOR_HEADS[estimator], cfg, class_count)
            _, ev = train_and_evaluate(
                spec, train, test.features, epochs, batch, cfg.learning_rate,
                derive_seed(seed, "train", estimator), derive_seed(seed, "eval", estimator), cfg,
            )
            _fill(record, estimator, ev, labels, clean, eval_mask, cfg)
            if job.experiment == "ood":
                record.per_sample[f"{estimator}_au"] = ev.au
                record.per_sample[f"{estimator}_eu"] = ev.eu
    except (TrainingError, ArithmeticError) as exc:
        record.status = f"failed: {exc}"
    return record


def run_jobs(jobs: list[Job], workers: int = 1) -> list[RunRecord]:
    """Execute jobs (optionally in a process pool) and sort by condition, rep."""
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run_job, jobs))
    else:
        records = [run_job(j) for j in jobs]
    return sorted(records, key=lambda r: (r.model, r.condition, r.rep))


def _jobs(kind: str, conditions, family: str, variants, cfg: ExperimentConfig) -> list[Job]:
    if isinstance(variants, str):
        variants = (variants,)
    return [Job(kind, family, v, float(c), rep, cfg) for v in variants for c in conditions for rep in range(cfg.repetitions)]


def run_dataset_size(cfg: ExperimentConfig, family: str, variants) -> list[RunRecord]:
    return run_jobs(_jobs("dataset-size", cfg.fractions, family, variants, cfg), cfg.jobs)


def run_label_noise(cfg: ExperimentConfig, family: str, variants) -> list[RunRecord]:
    return run_jobs(_jobs("label-noise", cfg.noise_levels, family, variants, cfg), cfg.jobs)


@dataclass
class OodScores:
    dataset: str
    model: str
    excluded: int
    rep: int
    ood_mask: np.ndarray
    scores: dict  # "it_au" -> per-sample scores over the full test set

    def aucs(self) -> dict:
        return {k: roc_auc(v, self.ood_mask) for k, v in self.scores.items()}


def run_ood(cfg: ExperimentConfig, family: str, variants) -> tuple[list[RunRecord], list[OodScores]]:
    """Leave each class out once per repetition; score OoD rows by uncertainty."""
    probe = make_split(family, cfg, 0)
    c = probe.train.class_count
    if c < 3:
        raise ConfigError("OoD experiment needs at least 3 classes")
    records = run_jobs(_jobs("ood", range(c), family, variants, cfg), cfg.jobs)
    scores = [
        OodScores(r.dataset, r.model, int(r.condition), r.rep, r.ood_mask, dict(r.per_sample))
        for r in records
        if not r.failed
    ]
    return records, scores


# ---------------------------------------------------------------------------
# Feature-space grids
# ---------------------------------------------------------------------------


@dataclass
class UncertaintyGrid:
    xs: np.ndarray
    ys: np.ndarray
    au: np.ndarray  # (len(ys), len(xs)); row 0 = smallest y
    eu: np.ndarray
    estimator: str

    @property
    def points(self) -> np.ndarray:
        gx, gy = np.meshgrid(self.xs, self.ys)
        return np.column_stack([gx.ravel(), gy.ravel()])


def grid_points(bounds: tuple[float, float, float, float], resolution: int) -> tuple[np.ndarray, np.ndarray]:
    x0, x1, y0, y1 = bounds
    return np.linspace(x0, x1, resolution), np.linspace(y0, y1, resolution)


def default_bounds(features: np.ndarray, margin: float = 0.5) -> tuple[float, float, float, float]:
    """Bounding box grown by ``margin`` of its span in total (half on each side)."""
    lo = features.min(axis=0)
    hi = features.max(axis=0)
    pad = 0.5 * margin * (hi - lo)
    return (float(lo[0] - pad[0]), float(hi[0] + pad[0]), float(lo[1] - pad[1]), float(hi[1] + pad[1]))


def uncertainty_grid(model: StochasticModel, bounds, resolution: int, passes: int, n_eval: int, rng) -> UncertaintyGrid:
    if model.members[0].input_width != 2:
        raise ConfigError("uncertainty grids need a model with 2-D inputs")
    xs, ys = grid_points(bounds, resolution)
    grid = UncertaintyGrid(xs, ys, np.empty(0), np.empty(0), "it" if model.spec.head == "softmax" else "gl")
    ev = evaluate(model, grid.points, passes, n_eval, rng)
    grid.au = ev.au.reshape(resolution, resolution)
    grid.eu = ev.eu.reshape(resolution, resolution)
    return grid


def write_grid(grid: UncertaintyGrid, out_dir: str | Path, prefix: str = "") -> list[Path]:
    """``grid_<kind>.csv`` (x, y, value) and an 8-bit PGM per raster."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    pts = grid.points
    for kind, raster in (("au", grid.au), ("eu", grid.eu)):
        name = f"{prefix}{grid.estimator}_{kind}"
        csv_path = out_dir / f"grid_{name}.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "value"])
            for (x, y), v in zip(pts, raster.ravel()):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(v))])
        pgm_path = out_dir / f"grid_{name}.pgm"
        write_pgm(raster, pgm_path, comment=f"{name}; row 0 = min y, col 0 = min x; min-max scaled")
        written += [csv_path, pgm_path]
    return written


def write_pgm(raster: np.ndarray, path: str | Path, comment: str = "") -> None:
    """Binary (P5) 8-bit PGM; values min-max scaled to 0..255.

    Rows are written in array order, so row 0 of the file is row 0 of
    ``raster``.
    """
    lo, hi = float(raster.min()), float(raster.max())
    scaled = np.zeros(raster.shape) if hi == lo else (raster - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = raster.shape
    header = f"P5\n# {comment}\n# value range [{lo!r}, {hi!r}]\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + pixels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        end = data.index(b"\n", pos)
        line = data[pos:end]
        pos = end + 1
        if line.startswith(b"#"):
            continue
        fields += line.split()
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(data[pos : pos + w * h], dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# Failure case and underfitting studies
# ---------------------------------------------------------------------------


@dataclass
class TrianglesResult:
    left_eu: float
    right_eu: float
    bin_au: np.ndarray
    spearman: float
    grids: list[UncertaintyGrid]

    @property
    def eu_ratio(self) -> float:
        return self.left_eu / self.right_eu


TRIANGLE_BOUNDS = (-0.5, 1.5, -1.0, 1.0)


def run_triangles(cfg: ExperimentConfig, resolution: int = 41, bins: int = 5) -> TrianglesResult:
    """MC-Dropout + IT on the triangles data, probed on a grid.

    EU is averaged over the bands left (x < 0) and right (x > 1) of the data;
    AU over ``bins`` equal x-bins spanning the data.
    """
    left, right, bin_au, grids = [], [], [], []
    edges = np.linspace(0.0, 1.0, bins + 1)
    for rep in range(cfg.repetitions):
        split = make_split("triangles", cfg, rep)
        seed = derive_seed(cfg.master_seed, "triangles", rep)
        spec = model_spec("triangles", "mc_dropout", "softmax", cfg)
        model = build_model(spec, derive_seed(seed, "train"))
        train_stochastic(model, split.train.features, split.train.labels,
                         TrainConfig(cfg.base_epochs, cfg.batch_for("triangles"), cfg.learning_rate, derive_seed(seed, "train")))
        grid = uncertainty_grid(model, TRIANGLE_BOUNDS, resolution, cfg.passes, cfg.n_eval, derive_seed(seed, "eval"))
        grids.append(grid)
        gx = grid.points[:, 0]
        au, eu = grid.au.ravel(), grid.eu.ravel()
        left.append(eu[gx < 0].mean())
        right.append(eu[gx > 1].mean())
        idx = np.digitize(gx, edges[1:-1])
        inside = (gx >= 0) & (gx <= 1)
        bin_au.append([au[inside & (idx == b)].mean() for b in range(bins)])
    bin_au = np.mean(bin_au, axis=0)
    rho = stats.spearmanr(np.arange(bins), bin_au).statistic
    return TrianglesResult(float(np.mean(left)), float(np.mean(right)), bin_au, float(rho), grids)


@dataclass
class UnderfittingResult:
    fixed_au: np.ndarray
    scaled_au: np.ndarray
    fixed_epochs: int
    scaled_epochs: int
    p_value: float


def run_underfitting(cfg: ExperimentConfig, fraction: float = 0.05) -> UnderfittingResult:
    """Two Moons MC-Dropout at a small fraction: fixed vs inverse-scaled epochs.

    Both arms share data, initialisation and seeds; only the epoch count
    differs. The p-value is a one-sided paired t-test of fixed > scaled AU.
    """
    fixed, scaled = [], []
    n_scaled = scaled_epochs(cfg.base_epochs, fraction, cfg.epoch_cap)
    for rep in range(cfg.repetitions):
        split = make_split("two_moons", cfg, rep)
        seed = derive_seed(cfg.master_seed, "underfitting", fraction, rep)
        train = stratified_subsample(split.train, fraction, derive_seed(seed, "subsample"))
        spec = model_spec("two_moons", "mc_dropout", "softmax", cfg)
        for epochs, sink in ((cfg.base_epochs, fixed), (n_scaled, scaled)):
            _, ev = train_and_evaluate(spec, train, split.test.features, epochs, cfg.batch_for("two_moons"),
                                       cfg.learning_rate, derive_seed(seed, "train"), derive_seed(seed, "eval"), cfg)
            sink.append(float(ev.au.mean()))
    fixed, scaled = np.array(fixed), np.array(scaled)
    p = float(stats.ttest_rel(fixed, scaled, alternative="greater").pvalue) if len(fixed) > 1 else float("nan")
    return UnderfittingResult(fixed, scaled, cfg.base_epochs, n_scaled, p)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def write_runs(records: list[RunRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUN_COLUMNS)
        for r in records:
            w.writerow(r.row())
    return path


def read_runs(path: str | Path) -> list[RunRecord]:
    def num(s, cast=float):
        return None if s == "" else cast(s)

    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(RunRecord(
                row["experiment"], row["dataset"], row["model"], float(row["condition"]), int(row["rep"]),
                int(row["seed"]), num(row["accuracy"]), num(row["it_au"]), num(row["it_eu"]), num(row["gl_au"]),
                num(row["gl_eu"]), num(row["gl_accuracy"]), num(row["clean_accuracy"]), int(row["epochs"]), row["status"],
            ))
    return out


def write_per_sample(records: list[RunRecord], out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for r in records:
        if not r.per_sample:
            continue
        keys = sorted(r.per_sample)
        path = out_dir / f"{r.model}_c{r.condition!r}_r{r.rep}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index"] + keys + (["ood"] if r.ood_mask is not None else []))
            for i in range(len(r.per_sample[keys[0]])):
                extra = [int(r.ood_mask[i])] if r.ood_mask is not None else []
                w.writerow([i] + [repr(float(r.per_sample[k][i])) for k in keys] + extra)
