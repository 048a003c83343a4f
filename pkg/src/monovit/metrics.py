"""Depth evaluation: median scaling and the seven standard error metrics.

Plain numpy, evaluation-only (nothing here touches the tape).
"""

from dataclasses import dataclass

import numpy as np

from .geometry import DepthRange


@dataclass(frozen=True)
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    COLUMNS = ("Abs Rel", "Sq Rel", "RMSE", "RMSE log", "d1<1.25",
               "d2<1.25^2", "d3<1.25^3")

    def row(self):
        return (self.abs_rel, self.sq_rel, self.rmse, self.rmse_log,
                self.delta1, self.delta2, self.delta3)


def _median_low(values):
    """Median pinned to the lower middle element for even counts."""
    s = np.sort(values.ravel())
    if s.size == 0:
        raise ValueError("median of empty set")
    return float(s[(s.size - 1) // 2])


def median_scale(pred, gt, valid):
    """Scale pred by median(gt[valid]) / median(pred[valid]).

    Returns (scaled_pred, factor).
    """
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    valid = np.asarray(valid, bool)
    if not valid.any():
        raise ValueError("median_scale: no valid pixels")
    factor = _median_low(gt[valid]) / _median_low(pred[valid])
    return pred * factor, factor


def compute_metrics(pred, gt, valid, clamp: DepthRange) -> MetricsReport:
    """Seven-metric report over valid pixels; pred clamped to `clamp` first."""
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    valid = np.asarray(valid, bool)
    if not valid.any():
        raise ValueError("compute_metrics: no valid pixels")
    g = gt[valid]
    if np.any(g <= 0):
        raise ValueError("compute_metrics: non-positive ground truth in valid set")
    p = np.clip(pred[valid], clamp.d_min, clamp.d_max)
    err = p - g
    ratio = np.maximum(p / g, g / p)
    return MetricsReport(
        abs_rel=float(np.mean(np.abs(err) / g)),
        sq_rel=float(np.mean(err ** 2 / g)),
        rmse=float(np.sqrt(np.mean(err ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
    )


def format_table(rows, labels):
    """Aligned text table, one MetricsReport per row."""
    header = ["image"] + list(MetricsReport.COLUMNS)
    lines = ["  ".join(f"{h:>10}" for h in header)]
    for label, rep in zip(labels, rows):
        cells = [f"{label:>10}"] + [f"{v:>10.4f}" for v in rep.row()]
        lines.append("  ".join(cells))
    return "\n".join(lines)


def mean_report(reports) -> MetricsReport:
    """Unweighted mean across images."""
    rows = np.array([r.row() for r in reports], dtype=float)
    return MetricsReport(*[float(v) for v in rows.mean(axis=0)])
