"""Offline detection metrics: F1 at 0.5, precision-recall curve / average precision, bounded KDE."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

KDE_CLAMP = 1e-6


class InputError(ValueError):
    """Metric inputs are empty, mismatched, or single-class."""


class F1Result(NamedTuple):
    precision: float
    recall: float
    f1: float
    degenerate: bool      # some ratio had a zero denominator and was set to 0


@dataclass
class PrCurve:
    """Points ordered by ascending threshold; prediction is positive when score >= threshold."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    auc: float

    def rows(self):
        return list(zip(self.thresholds.tolist(), self.precision.tolist(), self.recall.tolist()))


@dataclass
class DensityEstimate:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    def integral(self) -> float:
        return float(np.sum(self.density) / len(self.grid))


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    pr_auc: float
    curve: PrCurve
    kde_normal: DensityEstimate | None
    kde_failure: DensityEstimate | None
    n_points: int
    n_positive: int
    extra: dict = field(default_factory=dict)


def _flatten(preds, labels):
    p = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if p.size == 0:
        raise InputError("no predictions")
    if p.shape != y.shape:
        raise InputError(f"{p.size} predictions vs {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise InputError("labels must be binary")
    return p, y.astype(bool)


def f1_at_half(preds, labels) -> F1Result:
    """Failure is declared when the probability is strictly greater than 0.5."""
    p, y = _flatten(preds, labels)
    pred = p > 0.5
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    degenerate = False
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision, degenerate = 0.0, True
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall, degenerate = 0.0, True
    if precision + recall:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1, degenerate = 0.0, True
    return F1Result(precision, recall, f1, degenerate)


def pr_auc(preds, labels) -> PrCurve:
    """Precision/recall at every distinct score and the average precision sum(P * dR)."""
    p, y = _flatten(preds, labels)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise InputError("PR-AUC needs both positive and negative labels")
    order = np.argsort(-p, kind="stable")
    ps, ys = p[order], y[order]
    # last index of each block of equal scores, descending
    last = np.flatnonzero(np.r_[ps[1:] != ps[:-1], True])
    tp = np.cumsum(ys)[last]
    npred = last + 1
    precision = tp / npred
    recall = tp / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    auc = float(np.sum(precision * d_recall))
    return PrCurve(ps[last][::-1].copy(), precision[::-1].copy(), recall[::-1].copy(), auc)


def silverman_bandwidth(z: np.ndarray) -> float:
    n = z.size
    sd = float(np.std(z, ddof=1)) if n > 1 else 0.0
    q75, q25 = np.percentile(z, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    h = 0.9 * spread * n ** (-0.2)
    return h if h > 0 else 0.1


def kde_bounded(samples, grid_size: int = 200, bandwidth: float | None = None) -> DensityEstimate:
    """Gaussian KDE on (0, 1) built in logit space and mapped back with the Jacobian."""
    x = np.clip(np.asarray(samples, dtype=np.float64).ravel(), KDE_CLAMP, 1 - KDE_CLAMP)
    if x.size < 2:
        raise InputError("KDE needs at least two samples")
    z = np.log(x) - np.log1p(-x)
    h = bandwidth or silverman_bandwidth(z)
    grid = (np.arange(grid_size) + 0.5) / grid_size
    gz = np.log(grid) - np.log1p(-grid)
    dens = np.zeros(grid_size)
    # chunk over samples to bound memory
    for s in range(0, z.size, 4096):
        u = (gz[:, None] - z[None, s:s + 4096]) / h
        dens += np.exp(-0.5 * u * u).sum(axis=1)
    dens /= z.size * h * np.sqrt(2 * np.pi)
    dens /= grid * (1 - grid)
    total = dens.sum() / grid_size
    if total > 0:
        dens /= total
    return DensityEstimate(grid, dens, h)


def evaluate(preds, labels, grid_size: int = 200) -> MetricsReport:
    """All offline metrics over the flattened (frame, horizon step) pool."""
    p, y = _flatten(preds, labels)
    f = f1_at_half(p, y)
    curve = pr_auc(p, y)
    kde_n = kde_bounded(p[~y], grid_size) if (~y).sum() >= 2 else None
    kde_f = kde_bounded(p[y], grid_size) if y.sum() >= 2 else None
    return MetricsReport(f.precision, f.recall, f.f1, curve.auc, curve, kde_n, kde_f,
                         int(p.size), int(y.sum()))
