import itertools
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reference_tables import DATASET_SIZE_PCC, DE_TABLE, LABEL_NOISE_PCC
from uqbench.core import DomainError
from uqbench.metrics import (
    InsufficientDataError,
    PccRow,
    UndefinedCorrelationError,
    ci95,
    confidence_pcc,
    disentanglement_error,
    leaderboard,
    pearson,
    read_pcc,
    roc_auc,
    write_leaderboard,
    write_pcc,
)


def brute_auc(scores, positives):
    pos = [s for s, p in zip(scores, positives) if p]
    neg = [s for s, p in zip(scores, positives) if not p]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def mp_pearson(x, y):
    mpmath.mp.dps = 40
    x = [mpmath.mpf(float(v)) for v in x]
    y = [mpmath.mpf(float(v)) for v in y]
    mx, my = sum(x) / len(x), sum(y) / len(y)
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return float(sxy / mpmath.sqrt(sxx * syy))


# --- pearson -------------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(st.integers(3, 40), st.integers(0, 2**32 - 1))
def test_pearson_matches_arbitrary_precision(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    y = 0.3 * x + rng.normal(size=n)
    assert pearson(x, y) == pytest.approx(mp_pearson(x, y), abs=1e-12)


def test_pearson_edge_cases():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    with pytest.raises(UndefinedCorrelationError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(InsufficientDataError):
        pearson([1, 2], [1, 2])
    with pytest.raises(ValueError):
        pearson([1, 2, 3], [1, 2])


def test_confidence_pcc_negates_uncertainty():
    acc = [0.5, 0.7, 0.9]
    assert confidence_pcc([0.6, 0.4, 0.2], acc) == pytest.approx(1.0)
    assert confidence_pcc([0.3, 0.3, 0.3], acc) is None


# --- roc auc ---------------------------------------------------------------------


@settings(max_examples=300, deadline=None)
@given(st.integers(2, 50), st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_roc_auc_equals_pairwise_enumeration(n, seed, levels):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, levels, n).astype(float)  # few levels force ties
    labels = rng.random(n) < 0.5
    labels[0], labels[1] = True, False
    assert roc_auc(scores, labels) == brute_auc(scores, labels)


def test_roc_auc_known_values():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [False, False, True, True]) == 1.0
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [False, False, True, True]) == 0.0
    assert roc_auc([0.5, 0.5], [True, False]) == 0.5
    with pytest.raises(DomainError):
        roc_auc([0.1, 0.2], [True, True])


# --- confidence intervals ----------------------------------------------------------


def test_ci95_uses_student_t():
    # t(0.975, 4) = 2.7764451051977987 from standard tables
    v = [1.0, 2.0, 3.0, 4.0, 5.0]
    row = ci95(v)
    assert row.mean == 3.0
    assert row.ci95_halfwidth == pytest.approx(2.7764451051977987 * math.sqrt(2.5) / math.sqrt(5), rel=1e-12)
    with pytest.raises(InsufficientDataError):
        ci95([1.0])


# --- disentanglement error -----------------------------------------------------------


def test_de_ideal_and_worst():
    assert disentanglement_error(0, 1, 1, 0).de_sum == 0.0
    worst = disentanglement_error(1, -1, -1, 1)
    assert worst.de_sum == 6.0 and worst.de_mean == 1.5
    with pytest.raises(DomainError):
        disentanglement_error(1.2, 0, 0, 0)


def test_de_hand_computed_fixture():
    # IT / MC-Dropout / CIFAR10: 0.876 + 0.006 + 0.067 + 0.266
    ds = DATASET_SIZE_PCC[("CIFAR10", "mc_dropout", "it")]
    ln = LABEL_NOISE_PCC[("CIFAR10", "mc_dropout", "it")]
    de = disentanglement_error(ds[0], ds[1], ln[0], ln[1])
    assert de.de_sum == pytest.approx(1.215, abs=1e-12)
    assert de.de_mean == pytest.approx(0.30375, abs=1e-12)
    # GL / MC-Dropout / CIFAR10: 0.852 + 0.870 + 0.038 + 0.975
    ds = DATASET_SIZE_PCC[("CIFAR10", "mc_dropout", "gl")]
    ln = LABEL_NOISE_PCC[("CIFAR10", "mc_dropout", "gl")]
    assert disentanglement_error(ds[0], ds[1], ln[0], ln[1]).de_sum == pytest.approx(2.735, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(*[st.floats(-1, 1)] * 4)
def test_de_range_and_mean(a, b, c, d):
    de = disentanglement_error(a, b, c, d)
    assert 0.0 <= de.de_sum <= 6.0
    assert de.de_mean == de.de_sum / 4


def test_leaderboard_per_rep_aggregation(tmp_path):
    rows = []
    for rep, shift in enumerate([0.0, 0.1, 0.2]):
        rows.append(PccRow("toy", "m", "it", "dataset-size", rep, 0.1 + shift, 0.9))
        rows.append(PccRow("toy", "m", "it", "label-noise", rep, 0.8, 0.2))
        rows.append(PccRow("toy", "m", "gl", "dataset-size", rep, 0.5, 0.5))
        rows.append(PccRow("toy", "m", "gl", "label-noise", rep, 0.5, 0.5))
    board = leaderboard(rows)
    it = next(r for r in board if r.estimator == "it")
    expect = [(0.1 + s + 0.1 + 0.2 + 0.2) / 4 for s in (0.0, 0.1, 0.2)]
    assert it.de_mean == pytest.approx(np.mean(expect))
    assert it.ci95 == pytest.approx(ci95(expect).ci95_halfwidth)
    assert it.n_reps == 3 and it.rank == "best"
    assert next(r for r in board if r.estimator == "gl").rank == "second"
    write_leaderboard(board, tmp_path / "lb.csv")
    assert (tmp_path / "lb.csv").read_text().splitlines()[0] == "dataset,model,estimator,de_mean,de_sum,ci95,n_reps,rank"


def test_leaderboard_single_rep_has_no_interval():
    rows = [PccRow("toy", "m", "it", "dataset-size", 0, 0.0, 1.0), PccRow("toy", "m", "it", "label-noise", 0, 1.0, 0.0)]
    (row,) = leaderboard(rows)
    assert row.ci95 is None and row.de_sum == 0.0


def test_leaderboard_skips_incomplete_reps():
    rows = [PccRow("toy", "m", "it", "dataset-size", 0, 0.0, 1.0), PccRow("toy", "m", "it", "label-noise", 0, None, 0.0)]
    assert leaderboard(rows) == []


def test_pcc_csv_round_trip(tmp_path):
    rows = [PccRow("toy", "m", "it", "dataset-size", 0, 0.123456789012345, None)]
    write_pcc(rows, tmp_path / "p.csv")
    assert read_pcc(tmp_path / "p.csv") == rows
    (tmp_path / "bad.csv").write_text("dataset,model\nx,y\n")
    with pytest.raises(ValueError):
        read_pcc(tmp_path / "bad.csv")


def test_reference_de_cells_within_tolerance_count():
    # documents how many published cells the mean-of-four formula reproduces
    hits = 0
    for key, (published, _) in DE_TABLE.items():
        ds, ln = DATASET_SIZE_PCC[key], LABEL_NOISE_PCC[key]
        hits += abs(disentanglement_error(ds[0], ds[1], ln[0], ln[1]).de_mean - published) <= 0.02
    assert len(DE_TABLE) == 16
    assert hits == 7
