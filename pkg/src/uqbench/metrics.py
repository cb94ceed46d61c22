"""Pearson correlation, rank ROC-AUC, t-based confidence intervals and the
Disentanglement Error (DE).

DE compares four confidence-accuracy correlations with their ideal values:
aleatoric should not track accuracy when the dataset shrinks (ideal 0) but
should when labels get noisy (ideal 1); epistemic is the mirror image.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .core import DomainError


class UndefinedCorrelationError(ValueError):
    """One of the inputs has zero variance."""


class InsufficientDataError(ValueError):
    pass


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two 1-D vectors of equal length")
    if len(x) < 3:
        raise InsufficientDataError("pearson needs at least 3 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("zero variance input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def roc_auc(scores, positives) -> float:
    """Mann-Whitney AUC, P(pos > neg) + 0.5 P(tie), via average ranks."""
    scores = np.asarray(scores, dtype=float)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DomainError("ROC-AUC needs both positive and negative samples")
    ranks = stats.rankdata(scores)
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class SummaryRow:
    mean: float
    ci95_halfwidth: float
    n: int


def ci95(values) -> SummaryRow:
    """Mean with Student-t 95% half-width ``t(n-1, .975) * sd / sqrt(n)``."""
    v = np.asarray(values, dtype=float)
    if len(v) < 2:
        raise InsufficientDataError("need at least two values for a confidence interval")
    sd = v.std(ddof=1)
    half = float(stats.t.ppf(0.975, len(v) - 1) * sd / math.sqrt(len(v)))
    return SummaryRow(float(v.mean()), half, len(v))


@dataclass(frozen=True)
class DEResult:
    pcc_ds_ale: float
    pcc_ds_epi: float
    pcc_noise_ale: float
    pcc_noise_epi: float
    de_sum: float
    de_mean: float


def disentanglement_error(pcc_ds_ale: float, pcc_ds_epi: float, pcc_noise_ale: float, pcc_noise_epi: float) -> DEResult:
    for v in (pcc_ds_ale, pcc_ds_epi, pcc_noise_ale, pcc_noise_epi):
        if not -1.0 <= v <= 1.0:
            raise DomainError("correlations must lie in [-1, 1]")
    de = abs(pcc_ds_ale) + abs(pcc_ds_epi - 1.0) + abs(pcc_noise_ale - 1.0) + abs(pcc_noise_epi)
    return DEResult(pcc_ds_ale, pcc_ds_epi, pcc_noise_ale, pcc_noise_epi, de, de / 4.0)


def confidence_pcc(mean_uncertainty, accuracy) -> float | None:
    """PCC between confidence (negated mean uncertainty) and accuracy.

    Returns ``None`` when either series is constant.
    """
    try:
        return pearson(-np.asarray(mean_uncertainty, dtype=float), accuracy)
    except UndefinedCorrelationError:
        return None


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

PCC_COLUMNS = ("dataset", "model", "estimator", "experiment", "rep", "pcc_au", "pcc_eu")
OOD_COLUMNS = ("dataset", "model", "estimator", "class", "rep", "auc_au", "auc_eu")
LEADERBOARD_COLUMNS = ("dataset", "model", "estimator", "de_mean", "de_sum", "ci95", "n_reps", "rank")


@dataclass(frozen=True)
class PccRow:
    dataset: str
    model: str
    estimator: str
    experiment: str
    rep: int
    pcc_au: float | None
    pcc_eu: float | None


def pcc_rows(records, estimators=("it", "gl")) -> list[PccRow]:
    """One PCC pair per (dataset, model, estimator, experiment, repetition),
    taken across that repetition's conditions. Failed runs are skipped."""
    groups: dict = {}
    for r in records:
        if r.failed:
            continue
        groups.setdefault((r.dataset, r.model, r.experiment, r.rep), []).append(r)
    rows = []
    for (dataset, model, experiment, rep), runs in sorted(groups.items()):
        runs = sorted(runs, key=lambda r: r.condition)
        for est in estimators:
            acc = [r.estimator_accuracy(est) for r in runs]
            au = [getattr(r, f"{est}_au") for r in runs]
            eu = [getattr(r, f"{est}_eu") for r in runs]
            if len(runs) < 3 or any(v is None for v in acc + au + eu):
                continue
            rows.append(PccRow(dataset, model, est, experiment, rep, confidence_pcc(au, acc), confidence_pcc(eu, acc)))
    return rows


def _cell(v) -> str:
    return "" if v is None else repr(float(v))


def write_table(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow(row)


def write_pcc(rows: list[PccRow], path) -> None:
    write_table(path, PCC_COLUMNS, [
        [r.dataset, r.model, r.estimator, r.experiment, r.rep, _cell(r.pcc_au), _cell(r.pcc_eu)] for r in rows
    ])


def read_pcc(path) -> list[PccRow]:
    def num(s):
        return None if s.strip() == "" else float(s)

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(PCC_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [
            PccRow(d["dataset"], d["model"], d["estimator"], d["experiment"], int(d["rep"]), num(d["pcc_au"]), num(d["pcc_eu"]))
            for d in reader
        ]


def ood_rows(scores) -> list[list]:
    rows = []
    for s in scores:
        aucs = s.aucs()
        for est in ("it", "gl"):
            if f"{est}_au" in aucs:
                rows.append([s.dataset, s.model, est, s.excluded, s.rep, _cell(aucs[f"{est}_au"]), _cell(aucs[f"{est}_eu"])])
    return rows


@dataclass(frozen=True)
class LeaderboardRow:
    dataset: str
    model: str
    estimator: str
    de_mean: float
    de_sum: float
    ci95: float | None
    n_reps: int
    rank: str = ""


def leaderboard(rows: list[PccRow]) -> list[LeaderboardRow]:
    """DE per repetition, averaged per (dataset, model, estimator).

    Repetitions lacking either experiment or with an undefined PCC are
    dropped. The two lowest ``de_mean`` per dataset are tagged best/second.
    """
    table: dict = {}
    for r in rows:
        table.setdefault((r.dataset, r.model, r.estimator), {}).setdefault(r.rep, {})[r.experiment] = r
    out = []
    for (dataset, model, est), reps in sorted(table.items()):
        results = []
        for rep in sorted(reps):
            ds, ln = reps[rep].get("dataset-size"), reps[rep].get("label-noise")
            if ds is None or ln is None or None in (ds.pcc_au, ds.pcc_eu, ln.pcc_au, ln.pcc_eu):
                continue
            results.append(disentanglement_error(ds.pcc_au, ds.pcc_eu, ln.pcc_au, ln.pcc_eu))
        if not results:
            continue
        means = [d.de_mean for d in results]
        half = ci95(means).ci95_halfwidth if len(means) > 1 else None
        out.append(LeaderboardRow(dataset, model, est, float(np.mean(means)),
                                  float(np.mean([d.de_sum for d in results])), half, len(results)))
    ranked = []
    for dataset in sorted({r.dataset for r in out}):
        group = sorted((r for r in out if r.dataset == dataset), key=lambda r: r.de_mean)
        for i, r in enumerate(group):
            tag = "best" if i == 0 else "second" if i == 1 else ""
            ranked.append(LeaderboardRow(**{**r.__dict__, "rank": tag}))
    return ranked


def write_leaderboard(rows: list[LeaderboardRow], path) -> None:
    write_table(path, LEADERBOARD_COLUMNS, [
        [r.dataset, r.model, r.estimator, _cell(r.de_mean), _cell(r.de_sum), _cell(r.ci95), r.n_reps, r.rank] for r in rows
    ])
