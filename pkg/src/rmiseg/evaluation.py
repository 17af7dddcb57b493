"""Segmentation metrics: IOU, Precision@X, and the expression-length
break-down with relative gains between two models."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .language import encode
from .models import predict_mask

PRECISION_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)

# Bucket presets: short-expression regimes vs long ones.
SHORT_BUCKETS = ((1, 2), (3, 3), (4, 5), (6, 20))
LONG_BUCKETS = ((1, 5), (6, 7), (8, 10), (11, 20))


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks.

    Two empty masks agree perfectly, so that case is defined as 1.0.
    """
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask extents differ: {pred.shape} vs {gt.shape}")
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(pred, gt).sum()) / union


def precision_at(ious, thresholds=PRECISION_THRESHOLDS) -> dict:
    """Fraction of samples whose IOU is strictly greater than each threshold."""
    ious = list(ious)
    if not ious:
        raise ValueError("empty IOU list")
    for x in thresholds:
        if not 0.0 < x < 1.0:
            raise ValueError(f"threshold {x} outside (0, 1)")
    n = len(ious)
    return {x: sum(1 for v in ious if v > x) / n for x in thresholds}


def _check_buckets(buckets) -> list:
    buckets = [(int(lo), int(hi)) for lo, hi in buckets]
    expected = 1
    for lo, hi in buckets:
        if lo != expected or hi < lo:
            raise ValueError(f"buckets {buckets} do not partition [1, 20]")
        expected = hi + 1
    if expected != 21:
        raise ValueError(f"buckets {buckets} do not partition [1, 20]")
    return buckets


@dataclass
class BucketStat:
    lo: int
    hi: int
    count: int
    mean_iou: float  # NaN when the bucket is empty

    @property
    def label(self) -> str:
        return str(self.lo) if self.lo == self.hi else f"{self.lo}-{self.hi}"

    @property
    def empty(self) -> bool:
        return self.count == 0


def length_breakdown(lengths, ious, buckets=SHORT_BUCKETS) -> list:
    """Per-bucket mean IOU over expression-length groups.

    Empty buckets are reported as present-but-empty (count 0, NaN mean),
    never as zero IOU.
    """
    buckets = _check_buckets(buckets)
    lengths = list(lengths)
    ious = list(ious)
    if len(lengths) != len(ious):
        raise ValueError("lengths and ious differ in size")
    out = []
    for lo, hi in buckets:
        vals = [v for t, v in zip(lengths, ious) if lo <= t <= hi]
        mean = sum(vals) / len(vals) if vals else float("nan")
        out.append(BucketStat(lo=lo, hi=hi, count=len(vals), mean_iou=mean))
    return out


def relative_gain(base: BucketStat, other: BucketStat):
    """(other - base) / base, mirroring the break-down tables' gain row.

    None when either bucket is empty or the base mean is zero.
    """
    if base.empty or other.empty or base.mean_iou == 0.0:
        return None
    return (other.mean_iou - base.mean_iou) / base.mean_iou


@dataclass
class MetricsReport:
    per_sample_iou: list
    lengths: list
    cumulative_iou: float  # dataset-level: sum of intersections / sum of unions
    mean_iou: float
    precision: dict  # threshold -> fraction
    buckets: list = field(default_factory=list)

    def to_json(self) -> str:
        doc = {
            "cumulative_iou": self.cumulative_iou,
            "mean_iou": self.mean_iou,
            "precision": {f"{k:.1f}": v for k, v in sorted(self.precision.items())},
            "buckets": [
                {
                    "range": [b.lo, b.hi],
                    "count": b.count,
                    "mean_iou": None if b.empty else b.mean_iou,
                }
                for b in self.buckets
            ],
            "lengths": self.lengths,
            "per_sample_iou": self.per_sample_iou,
        }
        return json.dumps(doc, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        doc = json.loads(text)
        buckets = [
            BucketStat(
                lo=b["range"][0],
                hi=b["range"][1],
                count=b["count"],
                mean_iou=float("nan") if b["mean_iou"] is None else b["mean_iou"],
            )
            for b in doc["buckets"]
        ]
        return cls(
            per_sample_iou=doc["per_sample_iou"],
            lengths=doc["lengths"],
            cumulative_iou=doc["cumulative_iou"],
            mean_iou=doc["mean_iou"],
            precision={float(k): v for k, v in doc["precision"].items()},
            buckets=buckets,
        )


def evaluate(checkpoint, vocab, samples, buckets=SHORT_BUCKETS) -> MetricsReport:
    """Run the predictor over a dataset and aggregate every metric."""
    samples = list(samples)
    if not samples:
        raise ValueError("empty evaluation dataset")
    model = checkpoint.build_model()
    size = checkpoint.config.dims.image_size
    ious, lengths = [], []
    inter_total = union_total = 0
    for s in samples:
        seq = encode(s.expression, vocab)
        pred = predict_mask(model.forward(s.image, seq), size, size)
        gt = s.mask.astype(bool)
        inter_total += int(np.logical_and(pred, gt).sum())
        union_total += int(np.logical_or(pred, gt).sum())
        ious.append(iou(pred, gt))
        lengths.append(len(seq))
    return MetricsReport(
        per_sample_iou=ious,
        lengths=lengths,
        cumulative_iou=inter_total / union_total if union_total else 1.0,
        mean_iou=sum(ious) / len(ious),
        precision=precision_at(ious),
        buckets=length_breakdown(lengths, ious, buckets),
    )


def format_table(named_reports, show_gain: bool = True) -> str:
    """Plain-text break-down table: length row, per-method rows, and a
    relative-gain row when exactly two reports are compared."""
    if not named_reports:
        raise ValueError("nothing to format")
    buckets = named_reports[0][1].buckets
    width = max(12, max(len(name) for name, _ in named_reports) + 2)
    cell = 9

    def fmt_row(label, cells):
        return label.ljust(width) + "".join(str(c).rjust(cell) for c in cells)

    lines = [fmt_row("Length", [b.label for b in buckets] + ["overall"])]
    for name, report in named_reports:
        if [b.label for b in report.buckets] != [b.label for b in buckets]:
            raise ValueError("reports use different bucket boundaries")
        cells = ["-" if b.empty else f"{100 * b.mean_iou:.2f}" for b in report.buckets]
        cells.append(f"{100 * report.cumulative_iou:.2f}")
        lines.append(fmt_row(name, cells))
    if show_gain and len(named_reports) == 2:
        base, other = named_reports[0][1], named_reports[1][1]
        gains = []
        for a, b in zip(base.buckets, other.buckets):
            g = relative_gain(a, b)
            gains.append("-" if g is None else f"{100 * g:.2f}%")
        overall = (
            "-"
            if base.cumulative_iou == 0
            else f"{100 * (other.cumulative_iou - base.cumulative_iou) / base.cumulative_iou:.2f}%"
        )
        lines.append(fmt_row("Relative Gain", gains + [overall]))
    return "\n".join(lines)
