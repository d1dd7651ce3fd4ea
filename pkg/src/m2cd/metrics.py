"""Confusion-matrix accumulation and binary change-detection metrics.

All metrics derive from one dataset-global confusion matrix (micro
accumulation); matrices merge by fieldwise sums, so parallel evaluation
shards can accumulate privately and merge at the end.

Zero-denominator convention: any class-level ratio that is 0/0 is defined
as 1.0 (class absent and never predicted counts as perfect). F1 is computed
in count form, 2*TP / (2*TP + FP + FN), which equals the harmonic mean of
precision and recall whenever that mean is defined and avoids an
intermediate 0/0 when TP = 0 but FP + FN > 0.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import DataError


@dataclass
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v < 0:
                raise DataError(f"confusion counts must be nonnegative, got {f.name}={v}")
            setattr(self, f.name, int(v))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(
            tp=self.tp + other.tp,
            fp=self.fp + other.fp,
            tn=self.tn + other.tn,
            fn=self.fn + other.fn,
        )

    __add__ = merge


def _as_binary(mask: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    vals = np.unique(arr)
    if not np.all(np.isin(vals, (0, 1))):
        raise DataError(f"{name} must be binary (0/1), found values {vals[:8]}")
    return arr.astype(bool)


def accumulate(cm: ConfusionMatrix, pred_mask: np.ndarray, gt_mask: np.ndarray) -> ConfusionMatrix:
    """Add the pixel counts of one prediction/ground-truth pair (change = positive)."""
    pred = _as_binary(pred_mask, "pred_mask")
    gt = _as_binary(gt_mask, "gt_mask")
    if pred.shape != gt.shape:
        raise DataError(f"mask shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return cm.merge(
        ConfusionMatrix(
            tp=int(np.count_nonzero(pred & gt)),
            fp=int(np.count_nonzero(pred & ~gt)),
            tn=int(np.count_nonzero(~pred & ~gt)),
            fn=int(np.count_nonzero(~pred & gt)),
        )
    )


@dataclass
class MetricReport:
    oa: float
    m_prec: float
    m_rec: float
    m_f1: float
    m_iou: float
    prec_c: float
    rec_c: float
    f1_c: float
    iou_c: float
    prec_n: float
    rec_n: float
    f1_n: float
    iou_n: float


def _ratio(num: float, den: float) -> float:
    # 0/0 -> 1.0 by convention; num > 0 with den == 0 cannot occur for these counts.
    if den == 0:
        return 1.0
    return num / den


def compute(cm: ConfusionMatrix) -> MetricReport:
    """All metrics of one confusion matrix: OA plus mean and per-class Prec/Rec/F1/IoU."""
    if cm.total == 0:
        raise DataError("cannot compute metrics of an empty confusion matrix")
    tp, fp, tn, fn = cm.tp, cm.fp, cm.tn, cm.fn
    oa = (tp + tn) / cm.total
    prec_c = _ratio(tp, tp + fp)
    rec_c = _ratio(tp, tp + fn)
    prec_n = _ratio(tn, tn + fn)
    rec_n = _ratio(tn, tn + fp)
    f1_c = _ratio(2 * tp, 2 * tp + fp + fn)
    f1_n = _ratio(2 * tn, 2 * tn + fn + fp)
    iou_c = _ratio(tp, tp + fp + fn)
    iou_n = _ratio(tn, tn + fn + fp)
    return MetricReport(
        oa=oa,
        m_prec=0.5 * (prec_c + prec_n),
        m_rec=0.5 * (rec_c + rec_n),
        m_f1=0.5 * (f1_c + f1_n),
        m_iou=0.5 * (iou_c + iou_n),
        prec_c=prec_c,
        rec_c=rec_c,
        f1_c=f1_c,
        iou_c=iou_c,
        prec_n=prec_n,
        rec_n=rec_n,
        f1_n=f1_n,
        iou_n=iou_n,
    )


# Column order mirrors the usual comparison-table layout.
TABLE_COLUMNS = ("oa", "m_f1", "m_prec", "m_rec", "m_iou")


def format_table(rows: list[tuple[str, MetricReport]]) -> str:
    """Plain-text metrics table, values in percent."""
    header = f"{'name':<24}" + "".join(f"{c:>10}" for c in TABLE_COLUMNS)
    lines = [header, "-" * len(header)]
    for name, rep in rows:
        vals = "".join(f"{100.0 * getattr(rep, c):>10.2f}" for c in TABLE_COLUMNS)
        lines.append(f"{name:<24}" + vals)
    return "\n".join(lines)


def report_to_kv(report: MetricReport) -> str:
    """Machine-readable key=value serialization, one metric per line."""
    return "\n".join(f"{f.name}={getattr(report, f.name)!r}" for f in fields(MetricReport)) + "\n"


def report_from_kv(text: str) -> MetricReport:
    values = {}
    for line in text.strip().splitlines():
        if not line.strip():
            continue
        key, _, raw = line.partition("=")
        values[key.strip()] = float(raw)
    return MetricReport(**values)
