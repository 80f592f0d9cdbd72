import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_roc, naive_macro_prf
from spectrumfm.errors import CalibrationError, EvaluationError
from spectrumfm.metrics import (
    RocCurve,
    accuracy_by_snr,
    auc,
    build_report,
    calibrate_threshold,
    confusion_matrix,
    detection_rates,
    macro_prf,
    pd_at_pfa,
    roc_auc,
    roc_curve,
    write_report,
)

HAND_SCORES = [0.9, 0.8, 0.4, 0.1]
HAND_LABELS = [1, 1, 0, 0]


def test_hand_staircase():
    curve = roc_curve(HAND_SCORES, HAND_LABELS)
    assert curve.points() == [(0, 0), (0, 0.5), (0, 1), (0.5, 1), (1, 1)]
    assert curve.thresholds[0] == np.inf
    assert auc(curve) == 1.0
    assert pd_at_pfa(curve, 0.25) == 1.0


def test_perfect_separator_and_diagonal():
    curve = roc_curve([3, 2, 1, 0], [1, 1, 0, 0])
    assert (0.0, 1.0) in curve.points()
    assert pd_at_pfa(curve, 0.1) == 1.0
    diag = RocCurve(np.array([np.inf, 0.0]), np.array([0.0, 1.0]), np.array([0.0, 1.0]))
    assert auc(diag) == 0.5
    assert pd_at_pfa(diag, 0.3) == pytest.approx(0.3)


def test_one_class_input_rejected():
    with pytest.raises(EvaluationError):
        roc_curve([0.1, 0.2], [1, 1])
    with pytest.raises(EvaluationError):
        roc_curve([0.1, np.nan], [0, 1])


def test_invalid_curves_rejected():
    with pytest.raises(EvaluationError):
        auc([0.0, 0.6, 0.4, 1.0], [0.0, 0.5, 0.7, 1.0])
    with pytest.raises(EvaluationError):
        auc([0.0, 0.5], [0.0, 1.0])


def test_auc_monte_carlo_random_and_separable():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 2, 10_000)
    assert roc_auc(rng.random(10_000), labels) == pytest.approx(0.5, abs=0.05)
    assert roc_auc(labels + rng.random(10_000) * 0.5, labels) == 1.0
    curve = roc_curve(rng.random(10_000), labels)
    assert np.max(np.abs(curve.pd - curve.pfa)) < 0.05


score_lists = st.lists(st.integers(0, 20), min_size=2, max_size=200)


@settings(max_examples=100, deadline=None)
@given(score_lists, st.integers(0, 2**31 - 1))
def test_roc_matches_brute_force(raw, seed):
    labels = np.random.default_rng(seed).integers(0, 2, len(raw))
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    scores = [s / 4 for s in raw]                   # ties are frequent
    curve = roc_curve(scores, labels)
    expected = brute_force_roc(scores, labels.tolist())
    assert curve.points() == pytest.approx(expected, abs=0)


@settings(max_examples=100, deadline=None)
@given(score_lists, st.integers(0, 2**31 - 1))
def test_auc_properties(raw, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, len(raw))
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    s = np.asarray(raw, float)
    a = roc_auc(s, labels)
    assert 0.0 <= a <= 1.0
    assert roc_auc(np.exp(s / 5) * 3 - 7, labels) == a          # strictly monotone transform
    assert a + roc_auc(-s, labels) == pytest.approx(1.0, abs=1e-9)
    perm = rng.permutation(len(s))
    assert roc_auc(s[perm], labels[perm]) == a


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.integers(0, 30), min_size=4, max_size=4), min_size=4, max_size=4))
def test_macro_prf_equals_naive_loop(cm):
    assert macro_prf(np.array(cm)) == naive_macro_prf(cm)


def test_macro_prf_examples():
    assert macro_prf(np.eye(3, dtype=int) * 4) == (1.0, 1.0, 1.0)
    assert macro_prf([[5, 5], [5, 5]]) == (0.5, 0.5, 0.5)
    p, r, f = macro_prf([[8, 2], [4, 6]])
    assert p == pytest.approx((8 / 12 + 6 / 8) / 2)
    assert r == pytest.approx(0.7)
    # per-class F1 (0.7272.., 0.6666..) averaged
    assert f == pytest.approx((2 * (8 / 12) * 0.8 / (8 / 12 + 0.8) + 2 * 0.75 * 0.6 / 1.35) / 2)
    assert f == pytest.approx(0.6969697, abs=1e-7)
    assert macro_prf([[0, 0], [3, 1]])[0] == pytest.approx(0.5)    # class 0 never predicted scores 0
    with pytest.raises(EvaluationError):
        macro_prf(np.zeros((0, 0)))


def test_confusion_rows_are_class_counts():
    y = np.array([0, 0, 1, 2, 2, 2])
    cm = confusion_matrix(y, np.array([0, 1, 1, 2, 0, 2]), 3)
    assert cm.sum(axis=1).tolist() == np.bincount(y).tolist()
    with pytest.raises(EvaluationError):
        confusion_matrix([0, 3], [0, 1], 3)


def test_accuracy_by_snr():
    assert accuracy_by_snr([1, 1], [1, 1], [0.0, 5.0]) == {0.0: 1.0, 5.0: 1.0}
    assert accuracy_by_snr([1, 0, 1, 1], [1, 0, 0, 1], [2.0] * 4) == {2.0: 0.75}
    with pytest.raises(EvaluationError):
        accuracy_by_snr([1], [1], None)
    with pytest.raises(EvaluationError):
        accuracy_by_snr([1], [1], [np.nan])


def test_accuracy_by_snr_merge_equals_recomputation():
    rng = np.random.default_rng(0)
    y, p, s = rng.integers(0, 2, 100), rng.integers(0, 2, 100), rng.choice([-5.0, 0.0, 5.0], 100)
    a, b = accuracy_by_snr(y[:40], p[:40], s[:40]), accuracy_by_snr(y[40:], p[40:], s[40:])
    whole = accuracy_by_snr(y, p, s)
    for level in whole:
        n_a, n_b = (s[:40] == level).sum(), (s[40:] == level).sum()
        merged = (a.get(level, 0) * n_a + b.get(level, 0) * n_b) / (n_a + n_b)
        assert merged == pytest.approx(whole[level])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=100), st.integers(0, 2**31 - 1),
       st.floats(0, 1))
def test_calibrated_threshold_respects_target(scores, seed, target):
    labels = np.random.default_rng(seed).integers(0, 2, len(scores))
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    t = calibrate_threshold(scores, labels, target)
    _, pfa = detection_rates(scores, labels, t)
    assert pfa <= target + 1e-12


def test_calibration_examples_and_monotonicity():
    scores = np.linspace(0, 1, 101)
    labels = (np.arange(101) % 2 == 0).astype(int)
    ts = [calibrate_threshold(scores, labels, p) for p in (0.0, 0.05, 0.2, 0.5, 1.0)]
    assert ts == sorted(ts, reverse=True)
    assert calibrate_threshold([0.1, 0.2, 0.9, 0.7], [0, 0, 1, 1], 0.0) == pytest.approx(0.45)
    with pytest.raises(CalibrationError):
        calibrate_threshold([0.1, 0.2], [1, 1], 0.05)


def test_report_files_and_determinism(tmp_path):
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, 50)
    s = rng.random(50)
    snr = rng.choice([0.0, 5.0], 50)
    rep = build_report("SS", ["idle", "occupied"], y, (s >= 0.5).astype(int), snr, scores=s, threshold=0.5)
    a = write_report(rep, tmp_path / "a")
    b = write_report(rep, tmp_path / "b")
    assert [p.name for p in a] == ["roc.csv", "acc_by_snr.csv", "prf.csv", "confusion.csv", "summary.json"]
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
    assert (tmp_path / "a" / "roc.csv").read_text().splitlines()[0] == "threshold,pfa,pd"
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["metadata"]["empty_class_precision"] == 0.0
    assert 0.0 <= summary["auc"] <= 1.0
