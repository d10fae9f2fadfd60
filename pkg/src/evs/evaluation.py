"""mIoU bookkeeping, inconsistency statistics and the timing probe."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_same_shape
from .exceptions import EmptyEvaluationError, ValidationError

METRICS_SCHEMA = "evs.metrics"
METRICS_SCHEMA_VERSION = 1
DEFAULT_BUCKET = 0.005


@dataclass
class ConfusionMatrix:
    """``counts[gt, pred]`` over scored (non-ignore) pixels."""

    num_classes: int
    counts: np.ndarray = None

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValidationError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.num_classes, self.num_classes):
                raise ValidationError(f"counts must be {self.num_classes}x{self.num_classes}")
            if (self.counts < 0).any():
                raise ValidationError("counts must be nonnegative")

    @property
    def total(self):
        return int(self.counts.sum())

    def accumulate(self, pred, gt):
        """Add one frame in place and return ``self``."""
        check_same_shape(pred, gt, what="prediction and ground truth")
        c = self.num_classes
        p = pred.labels.astype(np.int64).ravel()
        g = gt.labels.astype(np.int64).ravel()
        keep = g != gt.ignore_id
        p, g = p[keep], g[keep]
        if p.size and (p.min() < 0 or p.max() >= c):
            bad = p[(p < 0) | (p >= c)][0]
            raise ValidationError(f"prediction contains class {bad} outside [0, {c})")
        if g.size and g.max() >= c:
            raise ValidationError(f"ground truth contains class {g.max()} outside [0, {c})")
        self.counts += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other):
        if other.num_classes != self.num_classes:
            raise ValidationError("cannot merge matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    __add__ = merge


def accumulate(cm, pred, gt):
    """Pure variant: a new matrix with ``(pred, gt)`` added."""
    return ConfusionMatrix(cm.num_classes, cm.counts.copy()).accumulate(pred, gt)


@dataclass(frozen=True)
class IoUResult:
    per_class: np.ndarray    # NaN for classes excluded from the mean
    present: np.ndarray      # bool, classes with a nonzero denominator
    miou: float

    def to_dict(self, class_names=None):
        names = class_names or [str(i) for i in range(self.per_class.size)]
        return {
            "miou": self.miou,
            "per_class": {n: (None if not ok else float(v))
                          for n, v, ok in zip(names, self.per_class, self.present)},
        }


def iou_per_class(cm):
    """``IoU_c = TP / (TP + FP + FN)``; classes with a zero denominator are excluded."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    denom = counts.sum(axis=0) + counts.sum(axis=1) - tp
    present = denom > 0
    if not present.any():
        raise EmptyEvaluationError("no class present in ground truth or prediction")
    iou = np.full(cm.num_classes, np.nan)
    iou[present] = tp[present] / denom[present]
    return IoUResult(iou, present, float(iou[present].mean()))


def evaluate(preds, gts, num_classes):
    cm = ConfusionMatrix(num_classes)
    for p, g in zip(preds, gts):
        cm.accumulate(p, g)
    return iou_per_class(cm)


class HopEvaluator:
    """Pooled confusion matrices grouped by hops since the last keyframe."""

    def __init__(self, num_classes):
        self.num_classes = num_classes
        self.by_hop = {}

    def add(self, hops, pred, gt):
        cm = self.by_hop.setdefault(int(hops), ConfusionMatrix(self.num_classes))
        cm.accumulate(pred, gt)

    def miou_by_hop(self):
        return {h: iou_per_class(cm).miou for h, cm in sorted(self.by_hop.items())}

    def overall(self):
        total = ConfusionMatrix(self.num_classes)
        for cm in self.by_hop.values():
            total = total + cm
        return iou_per_class(total)


# --------------------------------------------------------------------------
# inconsistency statistics

@dataclass
class InconsistencyStats:
    per_hop: dict                    # hop -> list of per-frame fractions
    bucket_width: float = DEFAULT_BUCKET

    def mean_by_hop(self):
        return {h: float(np.mean(v)) for h, v in sorted(self.per_hop.items()) if v}

    def histogram(self, hop=None):
        """``(edges, counts)`` with buckets of ``bucket_width`` over [0, 1]."""
        values = [f for h, v in self.per_hop.items() if hop is None or h == hop for f in v]
        n = int(np.ceil(1.0 / self.bucket_width - 1e-9))
        edges = np.minimum(np.arange(n + 1) * self.bucket_width, 1.0)
        counts, _ = np.histogram(values, bins=edges)
        return edges, counts

    def to_dict(self):
        out = {"bucket_width": self.bucket_width, "per_hop": {}}
        for h, v in sorted(self.per_hop.items()):
            edges, counts = self.histogram(h)
            nz = np.nonzero(counts)[0]
            out["per_hop"][str(h)] = {
                "frames": len(v),
                "mean_fraction": float(np.mean(v)) if v else None,
                "max_fraction": float(np.max(v)) if v else None,
                "histogram": {f"{edges[i]:.4f}": int(counts[i]) for i in nz},
            }
        return out


def inconsistency_statistics(results, threshold=0.5, bucket_width=DEFAULT_BUCKET):
    """Group per-frame flagged fractions (binary mask, before dilation) by hop count.

    ``results`` yields objects with ``hops`` and ``raw_mask`` attributes, as
    produced by the pipeline; frames without a mask are skipped.
    """
    if not 0 < bucket_width <= 1:
        raise ValidationError(f"bucket_width must be in (0, 1], got {bucket_width}")
    per_hop = {}
    for r in results:
        if getattr(r, "raw_mask", None) is None:
            continue
        per_hop.setdefault(int(r.hops), []).append(r.raw_mask.flagged_fraction(threshold))
    return InconsistencyStats(per_hop, bucket_width)


# --------------------------------------------------------------------------
# timing

@dataclass
class TimingReport:
    stage: str
    samples: list                    # retained durations, milliseconds
    warmup_discarded: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.samples:
            raise ValidationError("a timing report needs at least one sample")

    @property
    def count(self):
        return len(self.samples)

    @property
    def mean(self):
        return statistics.fmean(self.samples)

    @property
    def median(self):
        return statistics.median(self.samples)

    @property
    def stddev(self):
        return statistics.pstdev(self.samples)

    @property
    def flagged(self):
        """Mean and median disagree by more than two standard deviations."""
        return abs(self.mean - self.median) > 2 * self.stddev

    def to_dict(self, include_samples=True):
        d = {
            "stage": self.stage,
            "count": self.count,
            "warmup_discarded": self.warmup_discarded,
            "mean_ms": self.mean,
            "median_ms": self.median,
            "stddev_ms": self.stddev,
            "min_ms": min(self.samples),
            "max_ms": max(self.samples),
            "mean_median_flag": self.flagged,
        }
        d.update(self.meta)
        if include_samples:
            d["samples_ms"] = list(self.samples)
        return d


def timed_probe(stage_fn, samples=300, warmup=0, stage="stage", clock=time.perf_counter_ns):
    """Call ``stage_fn`` ``samples`` times and keep the durations after ``warmup``.

    ``clock`` must be monotonic and return nanoseconds.
    """
    if samples < 1:
        raise ValidationError(f"samples must be >= 1, got {samples}")
    if not 0 <= warmup < samples:
        raise ValidationError(f"warmup must be in [0, samples), got {warmup}")
    durations = []
    for _ in range(samples):
        t0 = clock()
        stage_fn()
        durations.append((clock() - t0) / 1e6)
    return TimingReport(stage, durations[warmup:], warmup)


# --------------------------------------------------------------------------
# export

def metrics_document(iou=None, hop_miou=None, inconsistency=None, timings=(), class_names=None,
                     extra=None):
    doc = {"schema": METRICS_SCHEMA, "schema_version": METRICS_SCHEMA_VERSION}
    if iou is not None:
        doc.update(iou.to_dict(class_names))
    if hop_miou is not None:
        doc["miou_by_hop"] = {str(h): v for h, v in sorted(hop_miou.items())}
    if inconsistency is not None:
        doc["inconsistency"] = inconsistency.to_dict()
    doc["timings"] = [t.to_dict(include_samples=False) for t in timings]
    if extra:
        doc.update(extra)
    return doc


def write_json(path, document):
    with open(path, "w") as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write("\n")
