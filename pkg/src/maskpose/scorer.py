"""Hypothesis scoring and pose initialization from matched correspondences.

The rigidity score measures how well the centered query points overlay the
centered template points.  Template points are expressed in the camera frame
of their hypothesis view, so no extra rotation is applied inside the score;
a hypothesis whose rotation matches the observed object makes the centered
sets coincide and every term's exponential hit one.  Subtracting weighted
centroids cancels translation entirely, which is why the proposal stage can
rank rotations before any translation is known.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from maskpose.geom import CameraModel, Rotation
from maskpose.matcher import CorrespondenceSet, _lower_median

__all__ = [
    "ScoreConfig",
    "ScoredHypothesis",
    "weighted_centroids",
    "rigidity_score",
    "select_top_k",
    "estimate_translation",
]


@dataclass(frozen=True)
class ScoreConfig:
    """sigma is the rigidity kernel width in meters; callers typically set it
    to a fixed fraction of the object diameter (0.1 * D by default upstream)."""

    sigma: float
    top_k: int = 7

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass(frozen=True)
class ScoredHypothesis:
    rotation: Rotation
    score: float
    correspondences: CorrespondenceSet
    index: int


def weighted_centroids(
    points_a: np.ndarray, points_b: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean of two paired point sets under shared weights."""
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0.0:
        raise ValueError("weights must have positive sum")
    a = np.asarray(points_a, dtype=np.float64)
    b = np.asarray(points_b, dtype=np.float64)
    return (w @ a) / total, (w @ b) / total


def rigidity_score(corr: CorrespondenceSet, sigma: float) -> float:
    """Translation-invariant weighted rigidity of a correspondence set.

    E = sum_i w_i * exp(-|(P_i - P_mean) - (Q_i - Q_mean)|^2 / (2 sigma^2)),
    bounded above by sum(w).  Empty or zero-weight sets raise.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if len(corr) == 0:
        raise ValueError("cannot score an empty correspondence set")
    p_mean, q_mean = weighted_centroids(corr.template_points, corr.query_points, corr.weights)
    d = (corr.template_points - p_mean) - (corr.query_points - q_mean)
    sq = np.einsum("ij,ij->i", d, d)
    return float(np.sum(corr.weights * np.exp(-sq / (2.0 * sigma * sigma))))


def select_top_k(scored: list[ScoredHypothesis], k: int) -> list[ScoredHypothesis]:
    """Best k hypotheses by score, descending; ties keep the lower index."""
    if k > len(scored):
        raise ValueError(f"k={k} exceeds hypothesis count {len(scored)}")
    order = np.argsort([-h.score for h in scored], kind="stable")
    return [scored[i] for i in order[:k]]


def estimate_translation(
    mask: np.ndarray, depth: np.ndarray, cam: CameraModel
) -> np.ndarray:
    """Initial translation from the visible mask and depth alone.

    Back-projects the per-axis lower-median mask pixel at the lower-median
    valid masked depth; medians make the estimate robust to mask specks and
    depth outliers.
    """
    mask = np.asarray(mask, dtype=bool)
    depth = np.asarray(depth, dtype=np.float64)
    if mask.shape != depth.shape:
        raise ValueError("mask and depth shapes differ")
    rows, cols = np.nonzero(mask)
    if len(rows) == 0:
        raise ValueError("mask is empty")
    z_candidates = depth[mask]
    z_candidates = z_candidates[np.isfinite(z_candidates) & (z_candidates > 0.0)]
    if len(z_candidates) == 0:
        raise ValueError("no valid depth inside mask")
    u = _lower_median(cols)
    v = _lower_median(rows)
    z = _lower_median(z_candidates)
    return cam.backproject(u, v, z)
