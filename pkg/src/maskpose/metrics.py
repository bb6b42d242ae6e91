"""Pose-accuracy metrics: ADD, ADD-S, threshold accuracy, and AR aggregation.

ADD is the mean distance between same-index model points under the
predicted and ground-truth poses; ADD-S replaces the pairing with a
nearest-neighbor search and is the symmetric-object variant.  Accuracy
counts errors strictly below a diameter-relative threshold.  The average
recall helper mirrors leaderboard-style aggregation: three per-error-
function recalls (each itself threshold-averaged) combined by arithmetic
mean; this package wires its ADD recall into all three slots.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from maskpose.geom import Pose
from maskpose.sampler import ObjectModel

__all__ = [
    "MetricConfig",
    "DEFAULT_AR_THRESHOLDS",
    "subsample_points",
    "add_error",
    "adds_error",
    "add_accuracy",
    "threshold_recall",
    "average_recall",
]

DEFAULT_AR_THRESHOLDS: tuple[float, ...] = tuple(
    round(0.05 * k, 2) for k in range(1, 11)
)

_MAX_METRIC_POINTS = 10_000


@dataclass(frozen=True)
class MetricConfig:
    """Thresholds for accuracy and recall aggregation.

    add_threshold_fraction is the diameter fraction below which a pose
    counts as correct; ar_thresholds are the diameter fractions averaged
    into a single recall per error function.
    """

    add_threshold_fraction: float = 0.1
    ar_thresholds: tuple[float, ...] = field(default=DEFAULT_AR_THRESHOLDS)
    symmetric: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.add_threshold_fraction < 1.0:
            raise ValueError("add_threshold_fraction must be in (0, 1)")
        thresholds = tuple(float(t) for t in self.ar_thresholds)
        if len(thresholds) == 0:
            raise ValueError("ar_thresholds must be nonempty")
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ValueError("ar_thresholds must be strictly ascending")
        if thresholds[0] <= 0:
            raise ValueError("ar_thresholds must be positive")
        object.__setattr__(self, "ar_thresholds", thresholds)


def subsample_points(points: np.ndarray, cap: int = _MAX_METRIC_POINTS) -> np.ndarray:
    """Deterministic stride subsample down to at most cap points."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n <= cap:
        return points
    stride = int(np.ceil(n / cap))
    return points[::stride]


def _metric_points(model: ObjectModel) -> np.ndarray:
    if len(model.points) == 0:
        raise ValueError("model has no points")
    return subsample_points(model.points)


def add_error(model: ObjectModel, pred: Pose, gt: Pose) -> float:
    """Mean distance between same-index model points under the two poses."""
    pts = _metric_points(model)
    return float(
        np.mean(np.linalg.norm(pred.transform(pts) - gt.transform(pts), axis=1))
    )


def adds_error(model: ObjectModel, pred: Pose, gt: Pose) -> float:
    """Mean nearest-neighbor distance: the symmetric-object ADD variant."""
    pts = _metric_points(model)
    predicted = pred.transform(pts)
    truth = gt.transform(pts)
    distances, _ = cKDTree(truth).query(predicted, k=1)
    return float(np.mean(distances))


def add_accuracy(
    errors: np.ndarray, model: ObjectModel, cfg: MetricConfig = MetricConfig()
) -> float:
    """Percentage of errors strictly below the diameter-relative threshold."""
    errs = np.asarray(errors, dtype=np.float64)
    if errs.size == 0:
        return 0.0
    threshold = cfg.add_threshold_fraction * model.diameter
    return float(100.0 * np.mean(errs < threshold))


def threshold_recall(
    errors: np.ndarray, model: ObjectModel, cfg: MetricConfig = MetricConfig()
) -> float:
    """Recall averaged over the configured diameter-fraction thresholds."""
    errs = np.asarray(errors, dtype=np.float64)
    if errs.size == 0:
        return 0.0
    recalls = [
        float(np.mean(errs < fraction * model.diameter))
        for fraction in cfg.ar_thresholds
    ]
    return float(np.mean(recalls))


def average_recall(per_metric_recalls: tuple[float, float, float]) -> float:
    """Arithmetic mean of three per-error-function recalls."""
    values = tuple(float(v) for v in per_metric_recalls)
    if len(values) != 3:
        raise ValueError("expected exactly three recalls")
    if any(not 0.0 <= v <= 1.0 for v in values):
        raise ValueError("recalls must lie in [0, 1]")
    return float(sum(values) / 3.0)
