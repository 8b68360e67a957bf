"""Threshold selection, confusion metrics, split scoring, baselines and raster export."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import GaussianParams, rasterize_density
from .subdivision import Partition

N_CANDIDATES = 256


class SingleClassError(ValueError):
    """Threshold selection needs both classes; fall back to 0.5."""


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(predictions, labels, threshold: float) -> ConfusionCounts:
    pred = np.asarray(predictions) >= threshold
    lab = np.asarray(labels).astype(bool)
    if pred.shape != lab.shape:
        raise ValueError(f"prediction shape {pred.shape} != label shape {lab.shape}")
    return ConfusionCounts(int(np.sum(pred & lab)), int(np.sum(pred & ~lab)),
                           int(np.sum(~pred & ~lab)), int(np.sum(~pred & lab)))


@dataclass
class MetricsReport:
    threshold: float
    f1: float
    accuracy: float
    tpr: float
    fpr: float
    precision: float
    counts: ConfusionCounts
    per_slot: list = field(default_factory=list)

    def to_json(self, **extra) -> str:
        d = asdict(self)
        d.update(extra)
        return json.dumps(d)


def _rates(c: ConfusionCounts):
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    fpr = c.fp / (c.fp + c.tn) if c.fp + c.tn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    acc = (c.tp + c.tn) / c.total if c.total else 0.0
    return precision, recall, fpr, f1, acc


def compute_metrics(predictions, labels, threshold: float, per_slot: bool = False) -> MetricsReport:
    """Binarize at ``threshold`` (>= is positive) and score.

    With ``per_slot``, the leading axis of the inputs indexes slots and a
    per-slot (f1, accuracy) breakdown is attached.
    """
    c = confusion(predictions, labels, threshold)
    precision, recall, fpr, f1, acc = _rates(c)
    rep = MetricsReport(float(threshold), f1, acc, recall, fpr, precision, c)
    if per_slot:
        for p, l in zip(np.asarray(predictions), np.asarray(labels)):
            _, _, _, f, a = _rates(confusion(p, l, threshold))
            rep.per_slot.append({"f1": f, "accuracy": a})
    return rep


def candidate_thresholds(n: int = N_CANDIDATES) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def select_threshold(predictions, labels, candidates=None) -> float:
    """Candidate maximizing TPR - FPR; ties go to the smallest threshold."""
    pred = np.asarray(predictions, dtype=float).ravel()
    lab = np.asarray(labels).astype(bool).ravel()
    n_pos, n_neg = int(lab.sum()), int((~lab).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("labels contain a single class; use the default threshold 0.5")
    cand = candidate_thresholds() if candidates is None else np.asarray(candidates, dtype=float)
    # count predictions >= each candidate through a sorted search
    pos_sorted = np.sort(pred[lab])
    neg_sorted = np.sort(pred[~lab])
    tp = n_pos - np.searchsorted(pos_sorted, cand, side="left")
    fp = n_neg - np.searchsorted(neg_sorted, cand, side="left")
    score = tp / n_pos - fp / n_neg
    return float(cand[int(np.argmax(score))])


def frequency_baseline(train_labels) -> np.ndarray:
    """Per-cell fraction of training slots with at least one event."""
    lab = np.asarray(train_labels)
    if lab.shape[0] == 0:
        raise ValueError("empty training split")
    return (lab >= 1).mean(axis=0)


def composite_likelihood_grid(gauss: GaussianParams, partition: Partition, rows: int | None = None,
                              cols: int | None = None) -> np.ndarray:
    """Full-grid clamped likelihood raster (defaults to the partition's own grid)."""
    I, J = partition.shape
    return rasterize_density(gauss, partition, rows or I, cols or J)


@dataclass
class SplitEvaluation:
    report: MetricsReport
    predictions: np.ndarray
    labels: np.ndarray


def evaluate_predictions(predictions, labels, threshold: float | None = None,
                         threshold_source=None) -> MetricsReport:
    """Score a split. The threshold comes from ``threshold`` or is selected on
    ``threshold_source = (predictions, labels)`` (the validation split)."""
    if threshold is None:
        if threshold_source is None:
            raise ValueError("need a threshold or a (predictions, labels) pair to select one")
        try:
            threshold = select_threshold(*threshold_source)
        except SingleClassError:
            threshold = 0.5
    return compute_metrics(predictions, labels, threshold, per_slot=True)


def evaluate_split(params, data, split: slice, window: int, threshold: float | None = None,
                   threshold_source=None, batch: int = 5) -> SplitEvaluation:
    """Predict every target slot of ``split`` from its preceding window and score it."""
    from .training import predict, split_targets

    targets = split_targets(split, window, data.n_slots)
    preds = predict(params, data, targets, window, batch)
    labels = data.labels[targets]
    if threshold is None and threshold_source is None:
        threshold_source = (preds, labels)
    return SplitEvaluation(evaluate_predictions(preds, labels, threshold, threshold_source), preds, labels)


def export_raster(raster, path, fmt: str | None = None) -> None:
    """Write a [0, 1] raster as plain PGM (P2, maxval 255) or full-precision CSV."""
    arr = np.atleast_2d(np.asarray(raster, dtype=float))
    if np.any(~np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("raster values must lie in [0, 1]")
    fmt = (fmt or str(path).rsplit(".", 1)[-1]).lower()
    if fmt == "pgm":
        pix = np.floor(255.0 * arr + 0.5).astype(int)
        rows, cols = pix.shape
        with open(path, "w") as fh:
            fh.write(f"P2\n{cols} {rows}\n255\n")
            for row in pix:
                fh.write(" ".join(str(v) for v in row) + "\n")
    elif fmt == "csv":
        with open(path, "w") as fh:
            for row in arr:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
    else:
        raise ValueError(f"unknown raster format {fmt!r}")


def read_csv_raster(path) -> np.ndarray:
    with open(path) as fh:
        return np.array([[float(v) for v in line.split(",")] for line in fh if line.strip()])
