"""Detection and classification metrics: ROC/AUC, Pd at a false-alarm rate,
per-SNR accuracy, macro precision/recall/F1, and CSV report writing.

Scores follow the convention "higher means positive"; a sample is declared
positive when ``score >= threshold``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CalibrationError, EvaluationError


@dataclass
class RocCurve:
    thresholds: np.ndarray
    pfa: np.ndarray
    pd: np.ndarray

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.pfa.tolist(), self.pd.tolist()))


def _binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise EvaluationError("scores and labels differ in length")
    if not np.all(np.isfinite(scores)):
        raise EvaluationError("scores must be finite")
    if not np.all(np.isin(labels, (0, 1))):
        raise EvaluationError("binary labels must be 0 or 1")
    labels = labels.astype(bool)
    if labels.all() or not labels.any():
        raise EvaluationError("ROC analysis needs both classes present")
    return scores, labels


def roc_curve(scores, labels) -> RocCurve:
    """Sweep every distinct score as a threshold, highest first.

    Tied scores form a single step.  The curve starts at (0, 0) with an
    infinite threshold and ends at (1, 1) at the lowest score.
    """
    scores, labels = _binary(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp, fp, thr = tp[last_of_group], fp[last_of_group], s[last_of_group]
    P, Nn = y.sum(), (~y).sum()
    return RocCurve(
        thresholds=np.r_[np.inf, thr],
        pfa=np.r_[0.0, fp / Nn],
        pd=np.r_[0.0, tp / P],
    )


def _check_curve(pfa, pd) -> tuple[np.ndarray, np.ndarray]:
    pfa = np.asarray(pfa, dtype=np.float64)
    pd = np.asarray(pd, dtype=np.float64)
    if pfa.shape != pd.shape or pfa.ndim != 1 or pfa.size < 2:
        raise EvaluationError("a ROC curve needs at least two (pfa, pd) points")
    if np.any(np.diff(pfa) < 0) or np.any(np.diff(pd) < 0):
        raise EvaluationError("ROC points must be sorted, nondecreasing in pfa and pd")
    if pfa.min() < 0 or pfa.max() > 1 or pd.min() < 0 or pd.max() > 1:
        raise EvaluationError("ROC coordinates must lie in [0, 1]")
    if pfa[0] != 0 or pfa[-1] != 1:
        raise EvaluationError("ROC curve must span pfa from 0 to 1")
    return pfa, pd


def auc(pfa, pd=None) -> float:
    """Trapezoidal area under a ROC curve.

    Accepts a :class:`RocCurve` or separate ``pfa``/``pd`` arrays.
    """
    if isinstance(pfa, RocCurve):
        pfa, pd = pfa.pfa, pfa.pd
    pfa, pd = _check_curve(pfa, pd)
    return float(np.sum(np.diff(pfa) * (pd[1:] + pd[:-1]) / 2))


def roc_auc(scores, labels) -> float:
    return auc(roc_curve(scores, labels))


def pd_at_pfa(curve: RocCurve, target_pfa: float) -> float:
    """Detection probability at ``target_pfa`` by linear interpolation on the curve.

    Where the curve is vertical at ``target_pfa`` the highest Pd is returned.
    """
    pfa, pd = _check_curve(curve.pfa, curve.pd)
    if not 0.0 <= target_pfa <= 1.0:
        raise EvaluationError("target_pfa must lie in [0, 1]")
    at = pfa == target_pfa
    if at.any():
        return float(pd[at].max())
    hi = int(np.searchsorted(pfa, target_pfa, side="right"))
    lo = hi - 1
    w = (target_pfa - pfa[lo]) / (pfa[hi] - pfa[lo])
    return float(pd[lo] + w * (pd[hi] - pd[lo]))


def calibrate_threshold(scores, labels, target_pfa: float) -> float:
    """Lowest-Pfa-constrained decision threshold on a calibration split.

    Returns a threshold whose empirical false-alarm rate is at most
    ``target_pfa`` while keeping as many detections as possible.  Between the
    highest negative score that must be rejected and the next larger score
    the midpoint is chosen.
    """
    try:
        scores, labels = _binary(scores, labels)
    except EvaluationError as exc:
        raise CalibrationError(str(exc)) from None
    if not 0.0 <= target_pfa <= 1.0:
        raise CalibrationError("target_pfa must lie in [0, 1]")
    neg = np.sort(scores[~labels])[::-1]
    allowed = int(np.floor(target_pfa * len(neg) + 1e-9))
    if allowed >= len(neg):
        return float(scores.min())
    reject = neg[allowed]
    above = scores[scores > reject]
    if above.size == 0:
        return float(np.nextafter(reject, np.inf))
    return float((reject + above.min()) / 2)


def detection_rates(scores, labels, threshold: float) -> tuple[float, float]:
    """``(pd, pfa)`` of the rule ``score >= threshold``."""
    scores, labels = _binary(scores, labels)
    decide = scores >= threshold
    return float(decide[labels].mean()), float(decide[~labels].mean())


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise EvaluationError("label arrays differ in length")
    for y in (y_true, y_pred):
        if y.size and (y.min() < 0 or y.max() >= num_classes):
            raise EvaluationError(f"labels must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def macro_prf(confusion) -> tuple[float, float, float]:
    """Unweighted class means of precision, recall and per-class F1.

    A class that is never predicted (or never present) scores 0 for the
    undefined ratio.
    """
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.size == 0:
        raise EvaluationError("confusion matrix must be square and nonempty")
    if np.any(cm < 0):
        raise EvaluationError("confusion counts must be nonnegative")
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    actual = cm.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(precision.mean()), float(recall.mean()), float(f1.mean())


def accuracy_by_snr(y_true, y_pred, snr_db) -> dict[float, float]:
    """Accuracy within each exact SNR value, keyed in ascending SNR order."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if snr_db is None:
        raise EvaluationError("samples carry no SNR annotations")
    snr = np.asarray(snr_db, dtype=np.float64)
    if not (y_true.shape == y_pred.shape == snr.shape):
        raise EvaluationError("labels, predictions and SNR tags differ in length")
    if not np.all(np.isfinite(snr)):
        raise EvaluationError("missing or non-finite SNR annotations")
    return {
        float(level): float((y_true[snr == level] == y_pred[snr == level]).mean())
        for level in np.unique(snr)
    }


@dataclass
class EvalReport:
    task: str
    class_names: list[str]
    accuracy: float
    accuracy_by_snr: dict[float, float]
    confusion: np.ndarray
    precision: float
    recall: float
    f1: float
    roc: RocCurve | None = None
    auc: float | None = None
    auc_by_snr: dict[float, float] = field(default_factory=dict)
    threshold: float | None = None
    pd: float | None = None
    pfa: float | None = None
    metadata: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "task": self.task,
            "class_names": list(self.class_names),
            "accuracy": self.accuracy,
            "accuracy_by_snr": {repr(k): v for k, v in self.accuracy_by_snr.items()},
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "auc": self.auc,
            "auc_by_snr": {repr(k): v for k, v in self.auc_by_snr.items()},
            "threshold": self.threshold,
            "pd": self.pd,
            "pfa": self.pfa,
            "metadata": self.metadata,
        }


def build_report(task: str, class_names, y_true, y_pred, snr_db, scores=None,
                 threshold: float | None = None, metadata: dict | None = None) -> EvalReport:
    """Assemble every metric for one evaluated split.

    ``scores`` (binary tasks only) enables the ROC/AUC family.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    cm = confusion_matrix(y_true, y_pred, len(class_names))
    p, r, f = macro_prf(cm)
    report = EvalReport(
        task=task, class_names=list(class_names),
        accuracy=float((y_true == y_pred).mean()),
        accuracy_by_snr=accuracy_by_snr(y_true, y_pred, snr_db),
        confusion=cm, precision=p, recall=r, f1=f, threshold=threshold,
        metadata={"empty_class_precision": 0.0, **(metadata or {})},
    )
    if scores is not None:
        report.roc = roc_curve(scores, y_true)
        report.auc = auc(report.roc)
        snr = np.asarray(snr_db, dtype=np.float64)
        for level in np.unique(snr):
            sel = snr == level
            if len(np.unique(y_true[sel])) == 2:
                report.auc_by_snr[float(level)] = roc_auc(np.asarray(scores)[sel], y_true[sel])
        if threshold is not None:
            report.pd, report.pfa = detection_rates(scores, y_true, threshold)
    return report


def _write_csv(path: Path, header, rows) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    tmp.replace(path)


def write_report(report: EvalReport, out_dir) -> list[Path]:
    """Write ``roc.csv``, ``acc_by_snr.csv``, ``prf.csv``, ``confusion.csv`` and ``summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if report.roc is not None:
        p = out / "roc.csv"
        _write_csv(p, ["threshold", "pfa", "pd"], [
            [repr(float(t)), repr(float(a)), repr(float(b))]
            for t, a, b in zip(report.roc.thresholds, report.roc.pfa, report.roc.pd)
        ])
        written.append(p)
    p = out / "acc_by_snr.csv"
    _write_csv(p, ["snr_db", "accuracy"], [[repr(k), repr(v)] for k, v in report.accuracy_by_snr.items()])
    written.append(p)
    p = out / "prf.csv"
    _write_csv(p, ["precision", "recall", "f1"], [[repr(report.precision), repr(report.recall), repr(report.f1)]])
    written.append(p)
    p = out / "confusion.csv"
    _write_csv(p, ["true\\pred", *report.class_names], [
        [name, *map(int, row)] for name, row in zip(report.class_names, report.confusion)
    ])
    written.append(p)
    p = out / "summary.json"
    tmp = p.with_name(p.name + ".tmp")
    tmp.write_text(json.dumps(report.summary(), indent=1, sort_keys=True) + "\n")
    tmp.replace(p)
    written.append(p)
    return written
