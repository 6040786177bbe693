"""Saliency evaluation measures: F-measure, MAE, E-measure and S-measure.

All functions take a prediction in [0, 1] and a binary ground truth of the
same shape (leading singleton channel axes are squeezed away).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .errors import DataError, ShapeError

BETA2 = 0.3
_EPS = np.finfo(np.float64).eps


class DegenerateMaskWarning(UserWarning):
    """Ground truth without foreground; the measure falls back to a convention."""


def _prepare(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    while pred.ndim > 2 and pred.shape[0] == 1:
        pred, gt = pred[0], gt[0]
    if pred.ndim != 2:
        raise ShapeError(f"expected a single-channel map, got shape {pred.shape}")
    return pred, gt


def _check_binary(gt: np.ndarray) -> np.ndarray:
    if not np.isin(gt, (0.0, 1.0)).all():
        raise DataError("ground truth must contain only 0 and 1")
    return gt.astype(bool)


def thresholds(n: int = 255) -> np.ndarray:
    """``n`` evenly spaced thresholds i/n, i = 0..n-1.

    Doubling ``n`` yields a superset, so a finer sweep never lowers max-F.
    """
    return np.arange(n) / n


def f_curve(pred, gt, n_thresholds: int = 255) -> np.ndarray:
    """F-beta at every threshold of :func:`thresholds` (binarisation ``pred >= t``)."""
    pred, gt = _prepare(pred, gt)
    g = _check_binary(gt).reshape(-1)
    p = pred.reshape(-1)
    t = thresholds(n_thresholds)
    # counts of predicted positives / true positives for every threshold in one pass
    order = np.sort(p)
    fg_sorted = np.sort(p[g])
    n_pos = p.size - np.searchsorted(order, t, side="left")
    tp = fg_sorted.size - np.searchsorted(fg_sorted, t, side="left")
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(n_pos > 0, tp / np.maximum(n_pos, 1), 0.0)
        recall = tp / g.sum() if g.sum() else np.zeros_like(t)
        denom = BETA2 * precision + recall
        f = np.where(denom > 0, (1 + BETA2) * precision * recall / np.where(denom > 0, denom, 1), 0.0)
    return f


def f_measure(pred, gt, n_thresholds: int = 255, mode: str = "max") -> float:
    """F-beta (beta^2 = 0.3): maximum over a threshold sweep, or adaptive.

    ``mode="adaptive"`` thresholds at twice the mean prediction (capped at 1).
    An all-background ground truth scores 0 and emits
    :class:`DegenerateMaskWarning`.
    """
    pred, gt = _prepare(pred, gt)
    g = _check_binary(gt)
    if not g.any():
        warnings.warn("f_measure: ground truth has no foreground; returning 0", DegenerateMaskWarning,
                      stacklevel=2)
        return 0.0
    if mode == "max":
        return float(f_curve(pred, gt, n_thresholds).max())
    if mode == "adaptive":
        t = min(2.0 * pred.mean(), 1.0)
        b = pred >= t
        tp = np.logical_and(b, g).sum()
        if tp == 0:
            return 0.0
        precision, recall = tp / b.sum(), tp / g.sum()
        return float((1 + BETA2) * precision * recall / (BETA2 * precision + recall))
    raise ValueError(f"unknown F-measure mode {mode!r}")


def mae(pred, gt) -> float:
    pred, gt = _prepare(pred, gt)
    return float(np.abs(pred - gt).mean())


def e_measure(pred, gt) -> float:
    """Enhanced-alignment measure with adaptive binarisation of the prediction."""
    pred, gt = _prepare(pred, gt)
    g = _check_binary(gt).astype(np.float64)
    if g.sum() in (0, g.size):
        # constant ground truth: alignment is undefined, fall back to agreement
        return float(1.0 - np.abs(pred - g).mean())
    fm = (pred >= min(2.0 * pred.mean(), 1.0)).astype(np.float64)
    dfm = fm - fm.mean()
    dgt = g - g.mean()
    align = 2.0 * dfm * dgt / (dfm * dfm + dgt * dgt + _EPS)
    return float(((align + 1.0) ** 2 / 4.0).mean())


def _object_score(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + _EPS)


def s_object(pred: np.ndarray, g: np.ndarray) -> float:
    u = g.mean()
    fg = _object_score(pred[g])
    bg = _object_score(1.0 - pred[~g])
    return u * fg + (1.0 - u) * bg


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    x, y = pred.mean(), gt.mean()
    d = max(n - 1, 1)
    sx = ((pred - x) ** 2).sum() / d
    sy = ((gt - y) ** 2).sum() / d
    sxy = ((pred - x) * (gt - y)).sum() / d
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + _EPS)
    return 1.0 if beta == 0 else 0.0


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


def _centroid(g: np.ndarray) -> tuple[int, int]:
    """Foreground centroid in 1-based pixel coordinates, halves rounded up."""
    h, w = g.shape
    if not g.any():
        return _round_half_up(w / 2), _round_half_up(h / 2)
    ys, xs = np.nonzero(g)
    return _round_half_up(xs.mean() + 1), _round_half_up(ys.mean() + 1)


def s_region(pred: np.ndarray, g: np.ndarray) -> float:
    h, w = g.shape
    x, y = _centroid(g)
    gf = g.astype(np.float64)
    area = h * w
    w1 = x * y / area
    w2 = y * (w - x) / area
    w3 = (h - y) * x / area
    w4 = 1.0 - w1 - w2 - w3
    quads = [(slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
             (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))]
    scores = [_ssim(pred[q], gf[q]) for q in quads]
    return w1 * scores[0] + w2 * scores[1] + w3 * scores[2] + w4 * scores[3]


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    """Structure measure: alpha * object term + (1 - alpha) * region term."""
    pred, gt = _prepare(pred, gt)
    g = _check_binary(gt)
    y = g.mean()
    if y == 0:
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())
    q = alpha * s_object(pred, g) + (1.0 - alpha) * s_region(pred, g)
    return float(min(max(q, 0.0), 1.0))


@dataclass(frozen=True)
class EvalReport:
    f_beta: float
    mae: float
    e_measure: float
    s_measure: float

    def as_row(self) -> list[float]:
        return [self.f_beta, self.mae, self.e_measure, self.s_measure]


def evaluate(pred, gt) -> EvalReport:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateMaskWarning)
        f = f_measure(pred, gt)
    return EvalReport(f, mae(pred, gt), e_measure(pred, gt), s_measure(pred, gt))


def mean_report(reports: Iterable[EvalReport]) -> EvalReport:
    reports = list(reports)
    if not reports:
        raise DataError("cannot average an empty set of reports")
    arr = np.array([r.as_row() for r in reports])
    return EvalReport(*(float(v) for v in arr.mean(axis=0)))


EVAL_HEADER = ["id", "F", "MAE", "E", "S"]


def write_eval_csv(path, ids: list[str], reports: list[EvalReport]) -> EvalReport:
    """Per-image rows followed by a ``mean`` row; returns the mean report."""
    summary = mean_report(reports)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EVAL_HEADER)
        for ident, rep in zip(ids, reports):
            writer.writerow([ident] + [repr(v) for v in rep.as_row()])
        writer.writerow(["mean"] + [repr(v) for v in summary.as_row()])
    return summary


def report_dict(rep: EvalReport) -> dict:
    return asdict(rep)
