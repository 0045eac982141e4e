"""Frame-level, instance-level and duration-stratified AUC / AP."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, UndefinedMetricError


def _prepare(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise DimensionError(f"{scores.size} scores vs {labels.size} labels")
    if scores.size == 0:
        raise UndefinedMetricError("empty input")
    if not np.all(np.isin(labels, (0, 1))):
        raise DimensionError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def _threshold_counts(scores, labels):
    """Cumulative (TP, FP) at each distinct threshold, scores descending."""
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last_of_group]
    fp = (last_of_group + 1) - tp
    return tp, fp


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve by the trapezoidal rule.

    Points are taken at every distinct score (ties share one point), plus
    the (0, 0) origin. This equals the Mann-Whitney statistic with half
    credit for tied positive/negative pairs.
    """
    scores, labels = _prepare(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    tp, fp = _threshold_counts(scores, labels)
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    return float(np.sum((tpr[1:] + tpr[:-1]) / 2.0 * np.diff(fpr)))


def average_precision(scores, labels) -> float:
    """Sum over thresholds of (R_i - R_{i-1}) * P_i, with R_0 = 0."""
    scores, labels = _prepare(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive")
    tp, fp = _threshold_counts(scores, labels)
    recall = np.r_[0.0, tp / n_pos]
    precision = tp / (tp + fp)
    return float(np.sum(np.diff(recall) * precision))


@dataclass(frozen=True)
class ErrorInstance:
    label: int
    start: int  # inclusive
    end: int  # inclusive
    mean_prob: float

    @property
    def duration(self) -> int:
        return self.end - self.start + 1


def group_instances(labels, probs) -> list[ErrorInstance]:
    """Split a sequence into maximal runs of constant label.

    Each run is scored by the mean predicted probability of its frames.
    """
    labels = np.asarray(labels).ravel()
    probs = np.asarray(probs, dtype=np.float64).ravel()
    if labels.shape != probs.shape:
        raise DimensionError(f"{labels.size} labels vs {probs.size} probabilities")
    if labels.size == 0:
        raise DimensionError("cannot group an empty sequence")
    edges = np.r_[0, np.nonzero(np.diff(labels))[0] + 1, labels.size]
    return [
        ErrorInstance(int(labels[s]), int(s), int(e - 1), float(probs[s:e].mean()))
        for s, e in zip(edges[:-1], edges[1:])
    ]


@dataclass
class StratumResult:
    auc: float | None
    ap: float | None
    n_frames: int
    n_positive: int
    n_instances: int  # error instances contributing positives


@dataclass
class MetricsReport:
    frame_auc: float | None
    frame_ap: float | None
    instance_auc: float | None
    instance_ap: float | None
    short: StratumResult
    long: StratumResult
    n_frames: int
    n_positive: int
    n_instances: int
    n_error_instances: int
    sample_rate: float
    boundary_frames: float
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")


def _safe(fn, scores, labels):
    try:
        return fn(scores, labels)
    except UndefinedMetricError:
        return None


def stratified_eval(labels, probs, sample_rate: float = 5.0, boundary_seconds: float = 3.0,
                    metadata: dict | None = None) -> MetricsReport:
    """Full evaluation over a pooled test set.

    ``labels`` and ``probs`` are either one sequence each or lists of
    per-video sequences. Instances never cross video boundaries. The short
    stratum keeps every normal frame plus the frames of error instances
    shorter than ``boundary_seconds * sample_rate``; the long stratum keeps
    every normal frame plus the remaining error frames.
    """
    if len(labels) and np.ndim(labels[0]) == 0:
        labels, probs = [labels], [probs]
    if len(labels) != len(probs):
        raise DimensionError(f"{len(labels)} label sequences vs {len(probs)} probability sequences")
    boundary = boundary_seconds * sample_rate

    all_y, all_p, is_short, is_long = [], [], [], []
    inst_y, inst_p = [], []
    n_short = n_long = 0
    for y, p in zip(labels, probs):
        y = np.asarray(y).ravel().astype(np.int64)
        p = np.asarray(p, dtype=np.float64).ravel()
        short_mask = np.zeros(y.size, dtype=bool)
        long_mask = np.zeros(y.size, dtype=bool)
        for inst in group_instances(y, p):
            inst_y.append(inst.label)
            inst_p.append(inst.mean_prob)
            if inst.label == 1:
                sl = slice(inst.start, inst.end + 1)
                if inst.duration < boundary:
                    short_mask[sl] = True
                    n_short += 1
                else:
                    long_mask[sl] = True
                    n_long += 1
        all_y.append(y)
        all_p.append(p)
        is_short.append(short_mask)
        is_long.append(long_mask)

    y = np.concatenate(all_y)
    p = np.concatenate(all_p)
    short_mask = np.concatenate(is_short)
    long_mask = np.concatenate(is_long)
    normal = y == 0

    def stratum(mask, count):
        keep = normal | mask
        return StratumResult(
            auc=_safe(roc_auc, p[keep], y[keep]),
            ap=_safe(average_precision, p[keep], y[keep]),
            n_frames=int(keep.sum()),
            n_positive=int(mask.sum()),
            n_instances=count,
        )

    return MetricsReport(
        frame_auc=_safe(roc_auc, p, y),
        frame_ap=_safe(average_precision, p, y),
        instance_auc=_safe(roc_auc, inst_p, inst_y),
        instance_ap=_safe(average_precision, inst_p, inst_y),
        short=stratum(short_mask, n_short),
        long=stratum(long_mask, n_long),
        n_frames=int(y.size),
        n_positive=int(y.sum()),
        n_instances=len(inst_y),
        n_error_instances=n_short + n_long,
        sample_rate=float(sample_rate),
        boundary_frames=float(boundary),
        metadata=dict(metadata or {}),
    )


def write_curve_csv(path, probs: Sequence[float], labels: Sequence[int]):
    """Per-frame probability curve: frame_index, probability, label."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_index", "probability", "label"])
        for i, (p, y) in enumerate(zip(probs, labels)):
            w.writerow([i, repr(float(p)), int(y)])
