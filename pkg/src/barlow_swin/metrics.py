"""Thresholded segmentation metrics and CSV report export.

Zero-denominator convention: a ratio whose numerator and denominator sets
are both empty scores 1 (e.g. precision with no predicted and no true
foreground), otherwise 0.  A perfect all-background prediction therefore
scores 1 on every metric.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

from .exceptions import DataError

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "miou", "dice")


def confusion_counts(pred_binary: np.ndarray, target: np.ndarray):
    p = np.asarray(pred_binary).astype(bool)
    t = np.asarray(target).astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(np.count_nonzero(~p & ~t))
    return tp, fp, tn, fn


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def compute_metrics(pred, target, threshold: float = 0.5) -> Dict[str, float]:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"compute_metrics shape mismatch: pred {pred.shape} vs target {target.shape}")
    tp, fp, tn, fn = confusion_counts(pred >= threshold, target > 0.5)
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    # harmonic mean of precision and recall in count form, so it agrees with dice to the last bit
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    iou_fg = _ratio(tp, tp + fp + fn)
    iou_bg = _ratio(tn, tn + fp + fn)
    return {
        "accuracy": (tp + tn) / pred.size,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "miou": (iou_fg + iou_bg) / 2,
        "dice": f1,
    }


@dataclass
class MetricsReport:
    samples: List[str] = field(default_factory=list)
    records: List[Dict[str, float]] = field(default_factory=list)
    threshold: float = 0.5

    def add(self, name: str, record: Dict[str, float]) -> None:
        self.samples.append(name)
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def _column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records], dtype=np.float64)

    def mean(self) -> Dict[str, float]:
        return {k: float(self._column(k).mean()) for k in METRIC_NAMES}

    def std(self) -> Dict[str, float]:
        return {k: float(self._column(k).std()) for k in METRIC_NAMES}


def export_report(report: MetricsReport, path) -> Path:
    """CSV: header, one row per sample, then ``mean`` and ``std`` rows; 6 decimals."""
    if not len(report):
        raise ValueError("cannot export an empty metrics report")
    path = Path(path)
    rows = [[name] + [f"{rec[k]:.6f}" for k in METRIC_NAMES] for name, rec in zip(report.samples, report.records)]
    mean, std = report.mean(), report.std()
    rows.append(["mean"] + [f"{mean[k]:.6f}" for k in METRIC_NAMES])
    rows.append(["std"] + [f"{std[k]:.6f}" for k in METRIC_NAMES])
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("sample",) + METRIC_NAMES)
            writer.writerows(rows)
    except OSError as exc:
        raise DataError(f"cannot write report {path}: {exc}") from None
    return path


def read_report(path) -> Dict[str, Dict[str, float]]:
    """Parse an exported CSV back into ``{sample: {metric: value}}`` (includes mean/std rows)."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return {row["sample"]: {k: float(row[k]) for k in METRIC_NAMES} for row in reader}
