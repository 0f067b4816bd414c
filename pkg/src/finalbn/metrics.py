"""Per-class classification metrics and calibration (Brier score, ECE, reliability bins)."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

METRICS_COLUMNS = (
    "epoch", "split", "loss", "accuracy",
    "precision0", "recall0", "f10",
    "precision1", "recall1", "f11",
    "brier", "ece", "mean_confidence",
)
RELIABILITY_COLUMNS = ("bin_lo", "bin_hi", "count", "avg_confidence", "avg_accuracy")
TRACE_COLUMNS = ("sample_index", "ground_truth", "p_class1")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_predictions(cls, labels, preds, target: int) -> "ConfusionCounts":
        labels = np.asarray(labels)
        preds = np.asarray(preds)
        pos, hit = labels == target, preds == target
        return cls(
            tp=int(np.sum(pos & hit)),
            fp=int(np.sum(~pos & hit)),
            tn=int(np.sum(~pos & ~hit)),
            fn=int(np.sum(pos & ~hit)),
        )


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def precision_recall_f1(counts: ConfusionCounts) -> tuple[float, float, float]:
    """Precision, recall and F1 for the target class; any 0/0 is taken as 0."""
    p = _ratio(counts.tp, counts.tp + counts.fp)
    r = _ratio(counts.tp, counts.tp + counts.fn)
    return p, r, f1_from(p, r)


def f1_from(precision: float, recall: float) -> float:
    return _ratio(2 * precision * recall, precision + recall)


def predict(probs: np.ndarray) -> np.ndarray:
    """Binary argmax; exact ties go to class 0."""
    probs = np.asarray(probs, dtype=np.float64)
    return (probs[:, 1] > probs[:, 0]).astype(np.int64)


def _check_rows(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64).reshape(-1, 2)
    if len(probs) and np.max(np.abs(probs.sum(axis=1) - 1.0)) > 1e-6:
        raise ValueError("probability rows must sum to 1 (within 1e-6)")
    return probs


def brier_score(probs, labels) -> float:
    """Mean over samples of the squared distance between the probability vector and the one-hot label."""
    probs = _check_rows(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if len(probs) == 0:
        return 0.0
    onehot = np.eye(2)[labels]
    return float(np.mean(np.sum((probs - onehot) ** 2, axis=1)))


@dataclass(frozen=True)
class CalibrationBin:
    lo: float
    hi: float
    count: int
    avg_confidence: float
    avg_accuracy: float


@dataclass(frozen=True)
class CalibrationReport:
    brier: float
    ece: float
    bins: list[CalibrationBin] = field(default_factory=list)
    mean_confidence: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationReport":
        return cls(d["brier"], d["ece"], [CalibrationBin(**b) for b in d["bins"]], d["mean_confidence"])


def ece(probs, labels, n_bins: int = 10) -> CalibrationReport:
    """Expected calibration error over equal-width confidence bins.

    Confidence is the max class probability. Bins are ``[lo, hi)`` except the
    last, which also holds confidence 1.0. Empty bins contribute nothing.
    """
    probs = _check_rows(probs)
    labels = np.asarray(labels, dtype=np.int64)
    m = len(probs)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    if m == 0:
        bins = [CalibrationBin(float(edges[b]), float(edges[b + 1]), 0, 0.0, 0.0) for b in range(n_bins)]
        return CalibrationReport(0.0, 0.0, bins, 0.0)
    conf = probs.max(axis=1)
    correct = (predict(probs) == labels).astype(np.float64)
    idx = np.minimum((conf * n_bins).astype(np.int64), n_bins - 1)
    bins = []
    total = 0.0
    for b in range(n_bins):
        sel = idx == b
        count = int(sel.sum())
        if count:
            avg_conf = float(conf[sel].mean())
            avg_acc = float(correct[sel].mean())
            total += count / m * abs(avg_acc - avg_conf)
        else:
            avg_conf = avg_acc = 0.0
        bins.append(CalibrationBin(float(edges[b]), float(edges[b + 1]), count, avg_conf, avg_acc))
    return CalibrationReport(brier_score(probs, labels), float(total), bins, float(conf.mean()))


@dataclass(frozen=True)
class TraceRow:
    sample_index: int
    ground_truth: int
    p_class1: float


def softmax_trace(probs, labels) -> list[TraceRow]:
    probs = np.asarray(probs, dtype=np.float64).reshape(-1, 2)
    return [TraceRow(i, int(y), float(p)) for i, (y, p) in enumerate(zip(labels, probs[:, 1]))]


def classification_summary(probs, labels) -> dict:
    """Accuracy, per-class precision/recall/F1 and calibration for one split."""
    probs = _check_rows(probs)
    labels = np.asarray(labels, dtype=np.int64)
    preds = predict(probs)
    out = {"accuracy": float(np.mean(preds == labels)) if len(labels) else 0.0}
    for c in (0, 1):
        p, r, f = precision_recall_f1(ConfusionCounts.from_predictions(labels, preds, c))
        out[f"precision{c}"], out[f"recall{c}"], out[f"f1{c}"] = p, r, f
    cal = ece(probs, labels)
    out.update(brier=cal.brier, ece=cal.ece, mean_confidence=cal.mean_confidence)
    return out


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_metrics_csv(epoch_rows, path) -> None:
    _write_csv(path, METRICS_COLUMNS, ([row[c] for c in METRICS_COLUMNS] for row in epoch_rows))


def write_reliability_csv(report: CalibrationReport | None, path) -> None:
    bins = report.bins if report is not None else []
    _write_csv(path, RELIABILITY_COLUMNS, ((b.lo, b.hi, b.count, b.avg_confidence, b.avg_accuracy) for b in bins))


def write_trace_csv(trace, path) -> None:
    _write_csv(path, TRACE_COLUMNS, ((t.sample_index, t.ground_truth, t.p_class1) for t in trace))


def read_trace_csv(path) -> list[TraceRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            TraceRow(int(r["sample_index"]), int(r["ground_truth"]), float(r["p_class1"]))
            for r in csv.DictReader(fh)
        ]
