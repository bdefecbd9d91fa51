"""Masked smooth-L1 training loss and disparity error metrics."""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .ops import branch_mask
from .tensor import Tensor, make_node

CRITICAL_POINT = 3.0
THRESHOLDS = (1, 2, 3, 4, 5)
CSV_HEADER = "mae,rms,gt1,gt2,gt3,gt4,gt5,d1,n"


class NoLabeledPixels(ValueError):
    """Raised when a loss or metric is asked to average over an empty set."""


def smooth_l1(x, inside=None):
    """(1/3) x^2 inside |x| < 3, |x| outside; continuous at the critical point."""
    ax = np.abs(x)
    if inside is None:
        inside = ax < CRITICAL_POINT
    return np.where(inside, x * x / CRITICAL_POINT, ax)


def smooth_l1_loss(pred: Tensor, gt) -> Tensor:
    """Mean of smooth_l1(gt - pred) over pixels whose ground truth is non-zero."""
    gt = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    valid = gt != 0
    n = int(valid.sum())
    if n == 0:
        raise NoLabeledPixels("no labeled pixels: every ground-truth value is 0")
    x = np.where(valid, gt - pred.data, 0)
    inside = branch_mask(np.abs(x) < CRITICAL_POINT)
    value = np.asarray(smooth_l1(x, inside)[valid].sum() / n, dtype=pred.dtype)

    def backward(g):
        # d/dpred of S(gt - pred)
        dsdx = np.where(inside, 2 * x / CRITICAL_POINT, np.sign(x))
        return (np.where(valid, -dsdx * (g / n), 0).astype(pred.dtype),)

    return make_node(value, (pred,), backward)


def _valid_mask(gt, mask):
    if mask is None:
        return gt != 0
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != gt.shape:
        raise ValueError(f"mask shape {mask.shape} != ground-truth shape {gt.shape}")
    return mask


def _prepare(pred, gt, mask):
    pred = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    valid = _valid_mask(gt, mask)
    if not valid.any():
        raise NoLabeledPixels("no valid pixels to evaluate")
    return pred[valid], gt[valid]


def _percent(flags):
    return 100.0 * int(np.count_nonzero(flags)) / flags.size


def d1_rate(pred, gt, mask=None) -> float:
    """Percentage of valid pixels with error > 3 px and > 5% of the true disparity."""
    p, g = _prepare(pred, gt, mask)
    e = np.abs(p - g)
    return _percent((e > 3) & (e > 0.05 * g))


@dataclass
class MetricReport:
    mae: float
    rms: float
    rate_gt_k: dict = field(default_factory=dict)
    d1: float = 0.0
    valid_count: int = 0

    def row(self):
        return [self.mae, self.rms] + [self.rate_gt_k[k] for k in THRESHOLDS] + [self.d1, self.valid_count]

    def to_text(self):
        keys = CSV_HEADER.split(",")
        return "".join(f"{k}={_fmt(v)}\n" for k, v in zip(keys, self.row()))

    def to_csv_row(self):
        return ",".join(_fmt(v) for v in self.row())

    def to_csv(self):
        return CSV_HEADER + "\n" + self.to_csv_row() + "\n"

    @classmethod
    def from_csv_row(cls, line):
        vals = line.strip().split(",")
        rates = {k: float(v) for k, v in zip(THRESHOLDS, vals[2:7])}
        return cls(float(vals[0]), float(vals[1]), rates, float(vals[7]), int(vals[8]))

    @classmethod
    def mean(cls, reports):
        reports = list(reports)
        if not reports:
            raise NoLabeledPixels("cannot average zero reports")
        avg = lambda f: float(np.mean([f(r) for r in reports]))  # noqa: E731
        return cls(avg(lambda r: r.mae), avg(lambda r: r.rms),
                   {k: avg(lambda r, k=k: r.rate_gt_k[k]) for k in THRESHOLDS},
                   avg(lambda r: r.d1), sum(r.valid_count for r in reports))


def _fmt(v):
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def disparity_metrics(pred, gt, mask=None) -> MetricReport:
    """MAE, RMS, >k px rates and D1 over valid pixels (mask, else gt != 0)."""
    p, g = _prepare(pred, gt, mask)
    e = np.abs(p - g)
    rates = {k: _percent(e > k) for k in THRESHOLDS}
    d1 = _percent((e > 3) & (e > 0.05 * g))
    return MetricReport(float(e.mean()), float(np.sqrt(np.mean(e * e))), rates, d1, int(e.size))


def write_reports_csv(named_reports, aggregate=None):
    """CSV text with a leading ``sample`` column; ``aggregate`` is appended as ``mean``."""
    buf = io.StringIO()
    buf.write("sample," + CSV_HEADER + "\n")
    for name, report in named_reports:
        buf.write(f"{name},{report.to_csv_row()}\n")
    if aggregate is not None:
        buf.write(f"mean,{aggregate.to_csv_row()}\n")
    return buf.getvalue()
