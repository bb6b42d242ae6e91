"""Pure evaluator functions for the training objectives.

These are diagnostics and a foundation for a future training harness: no
gradients, no optimizers, just the scalar objectives.  The pose loss
supervises an incremental update against the ground-truth pose, the
confidence loss trades each hypothesis error against its predicted
confidence, and the mask loss is pixel-wise binary cross-entropy against
the occlusion target (amodal minus visible).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from maskpose.geom import Pose, Rotation
from maskpose.refine import IncrementPrediction

__all__ = [
    "LossWeights",
    "pose_loss",
    "geodesic_error",
    "confidence_loss",
    "mask_bce",
    "occlusion_target",
    "total_loss",
]

_PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Multi-task weighting: total = l1 * pose + l2 * conf + l3 * mask.

    w_rot and w_trans weight the rotation and translation terms inside the
    pose loss; alpha_conf is the log-barrier strength of the confidence
    loss.
    """

    l1: float = 1.0
    l2: float = 1.0
    l3: float = 0.5
    w_rot: float = 1.0
    w_trans: float = 1.0
    alpha_conf: float = 1.0

    def __post_init__(self) -> None:
        for name in ("l1", "l2", "l3", "w_rot", "w_trans"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.alpha_conf <= 0:
            raise ValueError("alpha_conf must be positive")


def pose_loss(
    gt: Pose,
    current: Pose,
    inc: IncrementPrediction,
    weights: LossWeights = LossWeights(),
) -> float:
    """Incremental-update supervision.

    w_rot * ||R_gt - exp(dR) R_i||_F + w_trans * ||T_gt - (T_i + dT)||_2
    where (dR, dT) is the increment applied to the current pose.
    """
    updated = Rotation.from_axis_angle(inc.update.rotation).compose(current.rotation)
    rot_term = float(np.linalg.norm(gt.rotation.as_matrix() - updated.as_matrix()))
    new_trans = current.translation + inc.update.translation
    trans_term = float(np.linalg.norm(gt.translation - new_trans))
    return weights.w_rot * rot_term + weights.w_trans * trans_term


def geodesic_error(pred: Pose, gt: Pose) -> float:
    """Rotation-manifold distance plus translation distance.

    ||log(R_pred^T R_gt)||_F + ||t_pred - t_gt||_2; the matrix-log Frobenius
    norm equals sqrt(2) times the relative rotation angle.
    """
    relative = pred.rotation.inverse().compose(gt.rotation)
    angle = float(np.linalg.norm(relative.as_rotvec()))
    return np.sqrt(2.0) * angle + float(
        np.linalg.norm(pred.translation - gt.translation)
    )


def confidence_loss(
    errors: np.ndarray,
    confidences: np.ndarray,
    weights: LossWeights = LossWeights(),
) -> float:
    """Error-weighted confidence objective with a log barrier.

    (1/N) * sum(c_k * L_k - alpha * ln c_k); confidences are clamped to at
    least 1e-7 before the log.  The unconstrained minimizer over c is
    alpha / L, saturating at c = 1 when L <= alpha.
    """
    errs = np.asarray(errors, dtype=np.float64)
    confs = np.asarray(confidences, dtype=np.float64)
    if errs.shape != confs.shape or errs.ndim != 1:
        raise ValueError("errors and confidences must be 1-D arrays of equal length")
    if len(errs) == 0:
        raise ValueError("need at least one hypothesis")
    confs = np.clip(confs, _PROB_CLAMP, None)
    return float(np.mean(confs * errs - weights.alpha_conf * np.log(confs)))


def occlusion_target(amodal: np.ndarray, visible: np.ndarray) -> np.ndarray:
    """Supervision target for the occlusion mask: amodal minus visible."""
    amodal = np.asarray(amodal, dtype=bool)
    visible = np.asarray(visible, dtype=bool)
    if amodal.shape != visible.shape:
        raise ValueError("mask shapes disagree")
    return amodal & ~visible


def mask_bce(pred: np.ndarray, target: np.ndarray) -> float:
    """Pixel-wise binary cross-entropy, predictions clamped away from {0,1}."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes disagree")
    p = np.clip(pred, _PROB_CLAMP, 1.0 - _PROB_CLAMP)
    return float(-np.mean(target * np.log(p) + (1.0 - target) * np.log(1.0 - p)))


def total_loss(
    parts: tuple[float, float, float], weights: LossWeights = LossWeights()
) -> float:
    """Weighted sum of the (pose, confidence, mask) partial losses."""
    pose_part, conf_part, mask_part = parts
    return (
        weights.l1 * float(pose_part)
        + weights.l2 * float(conf_part)
        + weights.l3 * float(mask_part)
    )
