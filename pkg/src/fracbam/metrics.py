"""Confusion counts and the four classification metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

AVERAGES = ("binary", "micro", "macro")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int
    positive_class: str = "Fractured"

    def __post_init__(self):
        for k in ("tp", "fp", "tn", "fn"):
            v = getattr(self, k)
            if int(v) != v or v < 0:
                raise ValueError(f"{k} must be a nonnegative integer, got {v!r}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, pred, label, positive: int = 1,
                         positive_class: str = "Fractured") -> "ConfusionCounts":
        pred = np.asarray(pred).ravel()
        label = np.asarray(label).ravel()
        if pred.shape != label.shape:
            raise ValueError(f"{pred.size} predictions for {label.size} labels")
        pp, lp = pred == positive, label == positive
        return cls(int(np.sum(pp & lp)), int(np.sum(pp & ~lp)),
                   int(np.sum(~pp & ~lp)), int(np.sum(~pp & lp)), positive_class)

    def swapped(self) -> "ConfusionCounts":
        """The same outcomes seen with the other class as positive."""
        return ConfusionCounts(self.tn, self.fn, self.tp, self.fp, "other")


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    average: str = "binary"
    degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(num, den):
    return (num / den, False) if den else (0.0, True)


def _prf(c: ConfusionCounts):
    p, dp = _ratio(c.tp, c.tp + c.fp)
    r, dr = _ratio(c.tp, c.tp + c.fn)
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f1, dp or dr


def metrics_from_counts(counts: ConfusionCounts, average: str = "binary") -> MetricsReport:
    """Accuracy, precision, recall and F1.

    ``binary`` scores the positive class. ``macro`` averages precision and
    recall over both classes and takes F1 as their harmonic mean. ``micro``
    pools the per-class counts, so precision, recall and F1 all equal
    accuracy. A zero denominator yields 0 and sets ``degenerate``.
    """
    if average not in AVERAGES:
        raise ValueError(f"average must be one of {AVERAGES}, got {average!r}")
    if counts.total == 0:
        raise ValueError("cannot compute metrics over zero samples")
    acc = (counts.tp + counts.tn) / counts.total
    if average == "binary":
        p, r, f1, deg = _prf(counts)
    elif average == "micro":
        # pooled over both classes: every error is one FP and one FN
        p, _ = _ratio(counts.tp + counts.tn, counts.total)
        r, f1, deg = p, p, False
    else:
        a, b = _prf(counts), _prf(counts.swapped())
        p, r = (a[0] + b[0]) / 2, (a[1] + b[1]) / 2
        # harmonic mean of the averaged P and R, so f1 stays consistent with them
        f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        deg = a[3] or b[3]
    return MetricsReport(acc, p, r, f1, average, deg)


def full_report(counts: ConfusionCounts) -> dict:
    """All three averages plus the raw counts, ready for JSON."""
    doc = {"counts": {"tp": counts.tp, "fp": counts.fp, "tn": counts.tn, "fn": counts.fn,
                      "total": counts.total, "positive_class": counts.positive_class}}
    for avg in ("micro", "binary", "macro"):
        doc[avg] = metrics_from_counts(counts, avg).to_dict()
    return doc
