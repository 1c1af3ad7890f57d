"""Top-1 accuracy per observation ratio and the area under that curve."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ConfigError
from .model import forward_full


@dataclass
class AccuracyCurve:
    ratios: np.ndarray
    acc: np.ndarray

    def __post_init__(self):
        self.ratios = np.asarray(self.ratios, dtype=np.float64)
        self.acc = np.asarray(self.acc, dtype=np.float64)
        if self.ratios.shape != self.acc.shape or self.ratios.ndim != 1:
            raise ConfigError(f"ratios {self.ratios.shape} and acc {self.acc.shape} must be equal-length vectors")
        if np.any(np.diff(self.ratios) <= 0):
            raise ConfigError("observation ratios must be strictly increasing")


def auc(curve: AccuracyCurve) -> float:
    """Trapezoidal area under accuracy over [first ratio, last ratio].

    Units follow the accuracies: percentages in, percentage-units out.
    """
    if len(curve.ratios) < 2:
        raise ConfigError("AUC needs at least two points")
    r, a = curve.ratios, curve.acc
    return float(np.sum((r[1:] - r[:-1]) * (a[1:] + a[:-1]) / 2.0))


def predictions(params, features, batch_size=256):
    """Argmax class at every step, ``[N, T]``."""
    out = []
    with dc.no_grad():
        for i in range(0, len(features), batch_size):
            logits = forward_full(params, features[i:i + batch_size]).logits.data
            out.append(np.argmax(logits, axis=-1))
    return np.concatenate(out)


def eval_curve(params, dataset) -> AccuracyCurve:
    feats, labels = dataset.stacked()
    pred = predictions(params, feats)
    T = feats.shape[1]
    acc = (pred == labels[:, None]).mean(axis=0)
    return AccuracyCurve(np.arange(1, T + 1) / T, acc)


def write_metrics_csv(curve: AccuracyCurve, dest):
    """``rho,top1`` rows then ``auc,<value>``; ``dest`` is a path or text stream."""
    if hasattr(dest, "write"):
        _write_metrics(curve, dest)
        return
    with open(dest, "w", newline="") as fh:
        _write_metrics(curve, fh)


def _write_metrics(curve, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["rho", "top1"])
    for r, a in zip(curve.ratios, curve.acc):
        w.writerow([format(r, ".17g"), format(a, ".17g")])
    w.writerow(["auc", format(auc(curve), ".17g")])


def read_curve_csv(path) -> AccuracyCurve:
    """Read ``rho,top1`` rows; a trailing ``auc`` row and header are skipped."""
    ratios, acc = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0] in ("rho", "auc"):
                continue
            ratios.append(float(row[0]))
            acc.append(float(row[1]))
    return AccuracyCurve(ratios, acc)


# accuracy rows of the published tables, used as a fixed reference
PUBLISHED = {
    "ssv2": (np.arange(1, 11) / 10,
             [22.73, 27.81, 33.62, 40.52, 47.95, 53.94, 58.54, 61.49, 63.03, 63.56], 43.00),
    "ek55": (np.arange(1, 9) / 8,
             [25.12, 28.11, 30.36, 32.1, 33.93, 35.25, 35.71, 36.34], 28.27),
    "ucf101": (np.arange(1, 11) / 10,
               [92.15, 93.97, 95.03, 95.3, 95.75, 95.88, 96.35, 96.33, 96.54, 96.64], 85.95),
}
