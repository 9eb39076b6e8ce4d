"""Evaluation of probability maps against rasterised ground truth.

Rates follow TPR = TP / (TP + FN) and FPR = FP / (FP + TN); a cell is
predicted positive when its score is at least the threshold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from groundfail_svi.errors import DomainError, GridMismatchError
from groundfail_svi.raster_io import Raster

logger = logging.getLogger(__name__)

SCORE_CLAMP = 1e-6


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def rates(counts: ConfusionCounts) -> Tuple[float, float]:
    """(TPR, FPR); an empty denominator gives 0."""
    positives = counts.tp + counts.fn
    negatives = counts.fp + counts.tn
    tpr = counts.tp / positives if positives else 0.0
    fpr = counts.fp / negatives if negatives else 0.0
    return tpr, fpr


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    tpr: float
    fpr: float


@dataclass(frozen=True)
class RocCurve:
    points: Tuple[RocPoint, ...]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(p.threshold, p.tpr, p.fpr) for p in self.points], columns=["threshold", "tpr", "fpr"]
        )


def _paired_values(scores: Raster, truth: Raster) -> Tuple[np.ndarray, np.ndarray]:
    if not scores.spec.same_grid(truth.spec):
        raise GridMismatchError("scores and truth rasters do not share a grid")
    keep = ~(scores.nodata | truth.nodata)
    return scores.values[keep], truth.values[keep] > 0.5


def confusion_at_threshold(scores: Raster, truth: Raster, tau: float) -> ConfusionCounts:
    s, g = _paired_values(scores, truth)
    predicted = s >= tau
    return ConfusionCounts(
        tp=int(np.sum(predicted & g)),
        fp=int(np.sum(predicted & ~g)),
        tn=int(np.sum(~predicted & ~g)),
        fn=int(np.sum(~predicted & g)),
    )


def roc_curve(scores: Raster, truth: Raster, n_thresholds: int = 100) -> RocCurve:
    s, g = _paired_values(scores, truth)
    positives, negatives = np.sort(s[g]), np.sort(s[~g])
    if positives.size == 0 or negatives.size == 0:
        raise DomainError("ROC needs at least one positive and one negative cell")
    lo, hi = float(s.min()), float(s.max())
    sweep = np.linspace(hi, lo, max(int(n_thresholds), 1))
    thresholds = np.unique(np.concatenate([[hi + 1.0], sweep, [lo - 1.0]]))[::-1]

    tp = positives.size - np.searchsorted(positives, thresholds, side="left")
    fp = negatives.size - np.searchsorted(negatives, thresholds, side="left")
    tpr, fpr = tp / positives.size, fp / negatives.size

    points: List[RocPoint] = []
    for tau, t, f in zip(thresholds, tpr, fpr):
        if points and points[-1].tpr == t and points[-1].fpr == f:
            continue
        points.append(RocPoint(float(tau), float(t), float(f)))
    return RocCurve(tuple(points))


def auc(curve: RocCurve) -> float:
    fpr = np.array([p.fpr for p in curve.points])
    tpr = np.array([p.tpr for p in curve.points])
    return float(np.clip(trapezoid(tpr, fpr), 0.0, 1.0))


def normalize_scores(scores: Raster) -> Raster:
    valid = scores.valid_values()
    if valid.size == 0:
        raise DomainError("score raster has no data cells")
    lo, hi = float(valid.min()), float(valid.max())
    if hi == lo:
        logger.warning("score raster is constant (%g); normalising to 0.5", lo)
        values = np.where(scores.nodata, np.nan, 0.5)
    else:
        values = np.clip((scores.values - lo) / (hi - lo), SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    return Raster(scores.spec, values)


def cross_entropy_loss(scores: Raster, truth: Raster) -> float:
    q, g = _paired_values(scores, truth)
    if q.size == 0:
        raise DomainError("no cells to evaluate")
    q = np.clip(q, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    return float(-np.mean(np.where(g, np.log(q), np.log1p(-q))))


def common_mask(*rasters: Raster) -> np.ndarray:
    keep = np.ones(rasters[0].spec.shape, dtype=bool)
    for raster in rasters:
        keep &= ~raster.nodata
    return keep


def restrict(raster: Raster, keep: np.ndarray) -> Raster:
    return Raster(raster.spec, np.where(keep, raster.values, np.nan))


def evaluate_map(scores: Raster, truth: Raster, threshold: float, n_thresholds: int) -> Tuple[Dict[str, float], RocCurve]:
    """CEL, AUC and the single-threshold rates of one normalised map."""
    normalized = normalize_scores(scores)
    counts = confusion_at_threshold(normalized, truth, threshold)
    tpr, fpr = rates(counts)
    curve = roc_curve(normalized, truth, n_thresholds)
    report = {
        "cel": cross_entropy_loss(normalized, truth),
        "auc": auc(curve),
        "tpr": tpr,
        "fpr": fpr,
        "cells": counts.total,
    }
    return report, curve


def compare_prior_posterior(
    prior: Optional[Raster],
    posterior: Raster,
    truth: Raster,
    threshold: float = 0.5,
    n_thresholds: int = 100,
) -> Tuple[Dict[str, float], Dict[str, RocCurve]]:
    """Metrics of both maps on the cells valid in every input."""
    maps = [posterior, truth] + ([prior] if prior is not None else [])
    keep = common_mask(*maps)
    truth = restrict(truth, keep)
    post_report, post_curve = evaluate_map(restrict(posterior, keep), truth, threshold, n_thresholds)
    report = {f"{k}_posterior": v for k, v in post_report.items() if k != "cells"}
    report["cells"] = post_report["cells"]
    curves = {"posterior": post_curve}
    if prior is not None:
        prior_report, prior_curve = evaluate_map(restrict(prior, keep), truth, threshold, n_thresholds)
        report.update({f"{k}_prior": v for k, v in prior_report.items() if k != "cells"})
        cel_prior = prior_report["cel"]
        report["cel_reduction_pct"] = 100.0 * (cel_prior - post_report["cel"]) / cel_prior if cel_prior else 0.0
        curves["prior"] = prior_curve
    return report, curves
