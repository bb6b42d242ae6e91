"""Iterative render-and-compare refinement over a hypothesis batch.

Each object carries B candidate poses.  Every iteration renders (iteration 0)
or re-projects (later iterations, from the pristine iteration-0 reference) the
object at each candidate pose into the object's crop camera, asks a pluggable
predictor for a pose increment against the cropped query, and applies it.
Scores are overwritten with the predictor confidence of the final iteration.

The crop itself comes from amodal ROI re-alignment: the union of the visible
and occlusion masks is boxed, squared, expanded, and resampled to a fixed
crop size.  With an empty occlusion mask this degenerates to conventional
visible-mask cropping.  When the ROI is first established each hypothesis
translation is re-aligned onto the crop-center ray (at its own depth), so a
well-centered amodal ROI also re-centers a translation estimate that was
biased toward the visible fragment.

Increment bookkeeping: predictors return the rigid map-to-map transform
(R-hat, t-hat) aligning reference XYZ onto query XYZ.  The pose update is
additive in translation (T + dT), so the loop re-expresses the predictor's
translation as dT = (R-hat - I) @ T + t-hat before applying; with that
substitution the updated pose renders exactly where the predictor said the
query is, and a zero increment remains a no-op.

Before prediction both maps are re-expressed on the crop camera's pixel
rays (x and y recomputed from each pixel's depth).  Query and reference
reach the crop through different routes (depth resampling vs point
splatting), and without this normalization the two quantization schemes
disagree laterally by a fraction of a source pixel, which puts a floor
under the achievable alignment.
"""

from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy import ndimage

from maskpose.geom import CameraModel, Pose, Rotation, TangentUpdate
from maskpose.sampler import ObjectModel
from maskpose.warp import RgbXyzMap, WarpConfig, render_pointcloud, reproject

__all__ = [
    "RefineConfig",
    "HypothesisBatch",
    "IncrementPrediction",
    "AmodalState",
    "InsufficientOverlapError",
    "RefineResult",
    "apply_increment",
    "geometric_increment",
    "zero_increment",
    "amodal_state",
    "ampr_realign",
    "recenter_translation",
    "refine_batch",
    "select_best",
    "PREDICTORS",
]


class InsufficientOverlapError(ValueError):
    """Raised when two maps share fewer co-valid pixels than required."""


@dataclass(frozen=True)
class RefineConfig:
    """Knobs for the refinement loop.

    iterations is the number of render/predict/update passes; crop geometry
    (square expansion margin, output size) applies to every object ROI.
    use_amodal switches between amodal and visible-only cropping, and
    realign_every_iteration chooses whether the ROI barrier runs after each
    iteration or only once up front.
    """

    iterations: int = 4
    crop_size: int = 160
    crop_margin: float = 1.2
    use_amodal: bool = True
    realign_every_iteration: bool = True
    recenter: bool = True
    occlusion_dilation: int = 0
    inlier_sigma_scale: float = 3.0
    inlier_floor: float = 0.1
    residual_scale: float = 0.01
    min_covalid: int = 3
    max_fit_points: int = 4000
    point_weight: float = 0.02
    photo_weight: float = 0.005
    gn_iterations: int = 10
    predictor: str = "geometric"
    threads: int = 1
    warp: WarpConfig = field(default_factory=WarpConfig)

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.crop_size < 8:
            raise ValueError("crop_size must be at least 8 px")
        if self.crop_margin < 1.0:
            raise ValueError("crop_margin must be >= 1.0")
        if self.occlusion_dilation < 0:
            raise ValueError("occlusion_dilation must be >= 0")
        if self.inlier_sigma_scale <= 0:
            raise ValueError("inlier_sigma_scale must be positive")
        if self.inlier_floor <= 0:
            raise ValueError("inlier_floor must be positive")
        if self.residual_scale <= 0:
            raise ValueError("residual_scale must be positive")
        if self.min_covalid < 3:
            raise ValueError("min_covalid must be >= 3 (rigid alignment needs 3 points)")
        if self.max_fit_points < 3:
            raise ValueError("max_fit_points must be >= 3")
        if self.point_weight < 0:
            raise ValueError("point_weight must be >= 0")
        if self.photo_weight < 0:
            raise ValueError("photo_weight must be >= 0")
        if self.gn_iterations < 0:
            raise ValueError("gn_iterations must be >= 0")
        if self.predictor not in PREDICTORS:
            raise ValueError(f"unknown predictor {self.predictor!r}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass(frozen=True)
class IncrementPrediction:
    """A pose increment plus the predictor's confidence in [0, 1]."""

    update: TangentUpdate
    confidence: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must be in [0, 1]")


class FrameLike(Protocol):
    """Per-object observation: full-frame rasters refine reads from."""

    rgb: np.ndarray
    depth: np.ndarray
    visible_mask: np.ndarray
    occlusion_mask: np.ndarray | None


@dataclass(frozen=True)
class HypothesisBatch:
    """Flat object-major array of (object n, slot b, pose, score) entries."""

    object_idx: np.ndarray
    slot_idx: np.ndarray
    quats: np.ndarray
    trans: np.ndarray
    scores: np.ndarray

    def __post_init__(self) -> None:
        obj = np.asarray(self.object_idx, dtype=np.int64)
        slot = np.asarray(self.slot_idx, dtype=np.int64)
        quats = np.asarray(self.quats, dtype=np.float64)
        trans = np.asarray(self.trans, dtype=np.float64)
        scores = np.asarray(self.scores, dtype=np.float64)
        m = len(obj)
        if slot.shape != (m,) or quats.shape != (m, 4) or trans.shape != (m, 3) or scores.shape != (m,):
            raise ValueError("batch field lengths disagree")
        if m == 0:
            raise ValueError("batch must not be empty")
        pair_order = np.lexsort((slot, obj))
        if not np.array_equal(pair_order, np.arange(m)):
            raise ValueError("entries must be object-major with ascending slots")
        keys = obj * (slot.max() + 1) + slot
        if len(np.unique(keys)) != m:
            raise ValueError("(object, slot) pairs must be unique")
        for a in (obj, slot, quats, trans, scores):
            a.setflags(write=False)
        object.__setattr__(self, "object_idx", obj)
        object.__setattr__(self, "slot_idx", slot)
        object.__setattr__(self, "quats", quats)
        object.__setattr__(self, "trans", trans)
        object.__setattr__(self, "scores", scores)

    @classmethod
    def from_object_poses(
        cls,
        poses_per_object: Sequence[Sequence[Pose]],
        scores_per_object: Sequence[Sequence[float]] | None = None,
    ) -> "HypothesisBatch":
        obj, slot, quats, trans, scores = [], [], [], [], []
        for n, poses in enumerate(poses_per_object):
            for b, pose in enumerate(poses):
                obj.append(n)
                slot.append(b)
                quats.append(pose.rotation.quat)
                trans.append(pose.translation)
                scores.append(
                    0.0 if scores_per_object is None else float(scores_per_object[n][b])
                )
        return cls(np.array(obj), np.array(slot), np.array(quats), np.array(trans), np.array(scores))

    def __len__(self) -> int:
        return len(self.object_idx)

    def pose(self, k: int) -> Pose:
        return Pose(Rotation(self.quats[k]), self.trans[k])

    def rows_for_object(self, n: int) -> np.ndarray:
        return np.flatnonzero(self.object_idx == n)

    @property
    def object_ids(self) -> np.ndarray:
        return np.unique(self.object_idx)


@dataclass(frozen=True)
class AmodalState:
    """Masks and the ROI box describing one object's crop.

    The amodal mask is always the pixelwise union of the visible and
    occlusion masks; the box is the tight amodal bounding box expanded to a
    square with a margin factor and clamped to image bounds (so it may end
    up non-square at the border).  Boxes are half-open (u0, v0, u1, v1).
    """

    visible: np.ndarray
    occluded: np.ndarray
    amodal: np.ndarray
    box: tuple[int, int, int, int]
    crop_size: int


def apply_increment(pose: Pose, inc: IncrementPrediction) -> Pose:
    """Update a pose: R <- exp(dR) o R (left composition), T <- T + dT."""
    rot = Rotation.from_axis_angle(inc.update.rotation).compose(pose.rotation)
    return Pose(rot, pose.translation + inc.update.translation)


def _weighted_kabsch(
    ref: np.ndarray, query: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rigid transform mapping ref onto query: q = R @ r + t."""
    total = float(weights.sum())
    r_mean = weights @ ref / total
    q_mean = weights @ query / total
    rc = ref - r_mean
    qc = query - q_mean
    h = (weights[:, None] * rc).T @ qc
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rot, q_mean - rot @ r_mean


def _map_normals(m: RgbXyzMap) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel surface normals from central differences of the XYZ map.

    Returns (normals, good) where good marks pixels whose four neighbors are
    valid and whose tangent cross product is non-degenerate; elsewhere the
    normal is zero.
    """
    xyz = m.xyz.astype(np.float64)
    h, w = m.shape
    du = np.zeros_like(xyz)
    dv = np.zeros_like(xyz)
    du[:, 1:-1] = xyz[:, 2:] - xyz[:, :-2]
    dv[1:-1, :] = xyz[2:, :] - xyz[:-2, :]
    good = np.zeros((h, w), dtype=bool)
    good[1:-1, 1:-1] = (
        m.valid[1:-1, 2:] & m.valid[1:-1, :-2]
        & m.valid[2:, 1:-1] & m.valid[:-2, 1:-1]
    )
    cross = np.cross(du, dv)
    norm = np.linalg.norm(cross, axis=-1)
    good &= norm > 1e-12
    normals = np.zeros((h, w, 3))
    normals[good] = cross[good] / norm[good][:, None]
    return normals, good


def _ray_aligned(m: RgbXyzMap, cam: CameraModel) -> RgbXyzMap:
    """Re-express a map's XYZ on the camera's pixel-center rays.

    Each valid pixel keeps its depth; x and y are recomputed from the pixel
    center, which puts maps built by different quantization routes (depth
    resampling vs point splatting) into the same lateral convention.
    """
    vv, uu = np.indices(m.shape, dtype=np.float64)
    z = m.xyz[..., 2].astype(np.float64)
    x = (uu - cam.cx) / cam.fx * z
    y = (vv - cam.cy) / cam.fy * z
    xyz = np.where(m.valid[..., None], np.stack([x, y, z], axis=-1), 0.0)
    return RgbXyzMap(m.rgb, xyz.astype(np.float32), m.valid)


def _color_image(rgb: np.ndarray) -> np.ndarray:
    """Color raster as float64 in [0, 1] regardless of storage dtype."""
    arr = np.asarray(rgb)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def _bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear sample of a (H, W, C) raster at fractional pixel coords."""
    h, w = img.shape[:2]
    u0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2)
    fu = (u - u0)[..., None]
    fv = (v - v0)[..., None]
    top = img[v0, u0] * (1 - fu) + img[v0, u0 + 1] * fu
    bottom = img[v0 + 1, u0] * (1 - fu) + img[v0 + 1, u0 + 1] * fu
    return top * (1 - fv) + bottom * fv


@dataclass(frozen=True)
class _PhotoTerm:
    """Precomputed query-side data for the photometric alignment rows."""

    cam: CameraModel
    rgb: np.ndarray
    grad_u: np.ndarray
    grad_v: np.ndarray
    grad_ok: np.ndarray
    ref_rgb: np.ndarray
    weight: float


def _photo_term(
    query: RgbXyzMap,
    reference: RgbXyzMap,
    co: np.ndarray,
    cam: CameraModel,
    weight: float,
) -> _PhotoTerm:
    rgb = _color_image(query.rgb)
    grad_u = np.zeros_like(rgb)
    grad_v = np.zeros_like(rgb)
    grad_u[:, 1:-1] = 0.5 * (rgb[:, 2:] - rgb[:, :-2])
    grad_v[1:-1, :] = 0.5 * (rgb[2:, :] - rgb[:-2, :])
    grad_ok = np.zeros(query.shape, dtype=bool)
    grad_ok[1:-1, 1:-1] = (
        query.valid[1:-1, 2:] & query.valid[1:-1, :-2]
        & query.valid[2:, 1:-1] & query.valid[:-2, 1:-1]
    )
    return _PhotoTerm(cam, rgb, grad_u, grad_v, grad_ok,
                      _color_image(reference.rgb)[co], weight)


def _gauss_newton_fit(
    r: np.ndarray,
    q: np.ndarray,
    n: np.ndarray,
    has_n: np.ndarray,
    weights: np.ndarray,
    point_weight: float,
    gn_iterations: int,
    photo: _PhotoTerm | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Rigid transform mapping r onto q under a blended cost.

    Starts from the closed-form point-to-point solution and polishes it with
    Gauss-Newton steps on

        sum w [ (n . e)^2 + point_weight |e|^2 ]
          + photo_weight sum w |C_q(pi(R r + t)) - C_r|^2

    where e = R r + t - q, n is the query-surface normal, and the last term
    (present when a camera is supplied) compares the query color sampled at
    each mapped reference point's reprojection against the reference color.
    The plane term lets pairs slide tangentially, which frees projective
    (same-pixel) association from its local minimum on flat regions; the
    point term keeps the system full-rank when normals are degenerate; the
    photometric term supplies the tangential signal that geometry alone
    lacks on near-fronto-parallel faces (in-plane rotation and slide).
    """
    rot, t = _weighted_kabsch(r, q, weights)
    eye = np.eye(3)
    for _ in range(gn_iterations):
        rr = r @ rot.T
        mapped = rr + t
        e = mapped - q
        wp = weights * has_n
        jac_plane = np.concatenate([np.cross(rr, n), n], axis=1)
        res_plane = np.einsum("ij,ij->i", e, n)
        lhs = (jac_plane * wp[:, None]).T @ jac_plane
        rhs = (jac_plane * wp[:, None]).T @ res_plane
        wb = weights * point_weight
        zero = np.zeros(len(r))
        rows = (
            (np.stack([zero, rr[:, 2], -rr[:, 1]], axis=1), e[:, 0], eye[0]),
            (np.stack([-rr[:, 2], zero, rr[:, 0]], axis=1), e[:, 1], eye[1]),
            (np.stack([rr[:, 1], -rr[:, 0], zero], axis=1), e[:, 2], eye[2]),
        )
        for jac_rot, res, basis in rows:
            jac = np.concatenate([jac_rot, np.tile(basis, (len(r), 1))], axis=1)
            lhs += (jac * wb[:, None]).T @ jac
            rhs += (jac * wb[:, None]).T @ res
        if photo is not None and photo.weight > 0:
            cam = photo.cam
            h, w = photo.rgb.shape[:2]
            z = mapped[:, 2]
            safe = z > 1e-6
            u = np.where(safe, cam.fx * mapped[:, 0] / np.where(safe, z, 1.0) + cam.cx, -1.0)
            v = np.where(safe, cam.fy * mapped[:, 1] / np.where(safe, z, 1.0) + cam.cy, -1.0)
            inside = safe & (u >= 1) & (u <= w - 2) & (v >= 1) & (v <= h - 2)
            ui = np.clip(np.round(u).astype(np.int64), 0, w - 1)
            vi = np.clip(np.round(v).astype(np.int64), 0, h - 1)
            usable = inside & photo.grad_ok[vi, ui] & (weights > 0)
            if int(usable.sum()) >= 10:
                us, vs = u[usable], v[usable]
                pts = mapped[usable]
                sampled = _bilinear(photo.rgb, us, vs)
                grad_u = _bilinear(photo.grad_u, us, vs)
                grad_v = _bilinear(photo.grad_v, us, vs)
                res_ph = sampled - photo.ref_rgb[usable]
                zs = pts[:, 2]
                ju = np.stack(
                    [cam.fx / zs, np.zeros_like(zs), -cam.fx * pts[:, 0] / zs**2], axis=1
                )
                jv = np.stack(
                    [np.zeros_like(zs), cam.fy / zs, -cam.fy * pts[:, 1] / zs**2], axis=1
                )
                w_ph = photo.weight * weights[usable]
                for ch in range(photo.rgb.shape[-1]):
                    dc_dx = grad_u[:, ch, None] * ju + grad_v[:, ch, None] * jv
                    jac = np.concatenate([np.cross(pts, dc_dx), dc_dx], axis=1)
                    lhs += (jac * w_ph[:, None]).T @ jac
                    rhs += (jac * w_ph[:, None]).T @ res_ph[:, ch]
        lhs += 1e-12 * np.eye(6)
        step = np.linalg.solve(lhs, -rhs)
        delta = Rotation.from_axis_angle(step[:3]).as_matrix()
        rot = delta @ rot
        t = delta @ t + step[3:]
        if np.linalg.norm(step) < 1e-13:
            break
    return rot, t


def geometric_increment(
    query: RgbXyzMap,
    reference: RgbXyzMap,
    sigma_scale: float = 3.0,
    min_covalid: int = 3,
    point_weight: float = 0.02,
    gn_iterations: int = 10,
    inlier_floor: float = 0.1,
    residual_scale: float = 0.01,
    photo_weight: float = 0.005,
    cam: CameraModel | None = None,
    max_points: int | None = None,
) -> IncrementPrediction:
    """Deterministic pose-increment stand-in: robust rigid alignment.

    Over pixels valid in both maps, solves for the rigid transform mapping
    reference XYZ onto query XYZ: a closed-form point-to-point fit polished
    by Gauss-Newton steps on a blended point-to-plane / point-to-point /
    photometric cost (normals and color gradients from the query map; the
    photometric term needs `cam` and is skipped without it), with one robust
    re-fit that drops pairs whose point residual sits further than
    sigma_scale robust standard deviations from the residual median.  The
    inlier window never shrinks below inlier_floor (meters): the gate exists
    to reject corrupted data, which sits orders of magnitude above the
    residuals mis-association leaves behind while a pose is still
    converging, and those must keep their influence on the fit.

    Confidence is the inlier fraction damped by the inlier RMS residual
    (scaled by residual_scale), so an alignment that explains its inliers
    tightly outranks one that merely kept them inside the window.  Raises
    InsufficientOverlapError below min_covalid co-valid pixels.

    max_points, when set, evenly thins larger co-valid sets before fitting;
    the selection depends only on the masks, never on thread scheduling.
    """
    co = query.valid & reference.valid
    count = int(co.sum())
    if count < min_covalid:
        raise InsufficientOverlapError(
            f"{count} co-valid pixels, need at least {min_covalid}"
        )
    if max_points is not None and count > max_points:
        # Evenly thin the co-valid set; max_points stays a dense cover of the
        # overlap and the selection is deterministic regardless of threading.
        idx = np.flatnonzero(co.reshape(-1))
        take = np.linspace(0, count - 1, max_points).round().astype(np.int64)
        thin = np.zeros(co.size, dtype=bool)
        thin[idx[take]] = True
        co = thin.reshape(co.shape)
        count = max_points
    q = query.xyz[co].astype(np.float64)
    r = reference.xyz[co].astype(np.float64)
    normal_map, normal_good = _map_normals(query)
    n = normal_map[co]
    has_n = normal_good[co].astype(np.float64)
    photo = None
    if cam is not None and photo_weight > 0:
        photo = _photo_term(query, reference, co, cam, photo_weight)
    rot, t = _gauss_newton_fit(
        r, q, n, has_n, np.ones(count), point_weight, gn_iterations, photo
    )
    residuals = np.linalg.norm(r @ rot.T + t - q, axis=1)
    med = np.median(residuals)
    sigma = 1.4826 * np.median(np.abs(residuals - med))
    window = max(sigma_scale * sigma, inlier_floor)
    inliers = np.abs(residuals - med) <= window
    if int(inliers.sum()) >= min_covalid and not inliers.all():
        rot, t = _gauss_newton_fit(
            r, q, n, has_n, inliers.astype(np.float64),
            point_weight, gn_iterations, photo,
        )
        residuals = np.linalg.norm(r @ rot.T + t - q, axis=1)
    rms = float(np.sqrt(np.mean(residuals[inliers] ** 2)))
    # Sub-nanometer RMS counts as exact so perfect alignments keep an
    # undamped confidence equal to their inlier fraction.
    excess = max(rms - 1e-9, 0.0)
    confidence = float(inliers.mean()) / (1.0 + excess / residual_scale)
    return IncrementPrediction(
        TangentUpdate(Rotation.from_matrix(rot).as_rotvec(), t), confidence
    )


def zero_increment(
    query: RgbXyzMap,
    reference: RgbXyzMap,
    sigma_scale: float = 3.0,
    min_covalid: int = 3,
    **_unused: object,
) -> IncrementPrediction:
    """No-op predictor stub: zero update, zero confidence."""
    return IncrementPrediction(TangentUpdate(np.zeros(3), np.zeros(3)), 0.0)


PREDICTORS: dict[str, Callable[..., IncrementPrediction]] = {
    "geometric": geometric_increment,
    "zero": zero_increment,
}


def amodal_state(
    visible: np.ndarray,
    occluded: np.ndarray | None,
    crop_size: int,
    margin: float = 1.2,
    dilation: int = 0,
) -> AmodalState:
    """Build the per-object crop state from masks.

    With occluded=None a heuristic stub is used: the visible mask dilated by
    `dilation` pixels minus itself (empty at the default dilation of 0).
    """
    visible = np.asarray(visible, dtype=bool)
    if occluded is None:
        if dilation > 0:
            size = 2 * dilation + 1
            grown = ndimage.binary_dilation(visible, np.ones((size, size), bool))
            occluded = grown & ~visible
        else:
            occluded = np.zeros_like(visible)
    occluded = np.asarray(occluded, dtype=bool)
    if occluded.shape != visible.shape:
        raise ValueError("mask shapes disagree")
    amodal = visible | occluded
    if not amodal.any():
        raise ValueError("amodal mask is empty")
    rows = np.flatnonzero(amodal.any(axis=1))
    cols = np.flatnonzero(amodal.any(axis=0))
    v0, v1 = int(rows[0]), int(rows[-1]) + 1
    u0, u1 = int(cols[0]), int(cols[-1]) + 1
    side = max(u1 - u0, v1 - v0) * margin
    cu = 0.5 * (u0 + u1)
    cv = 0.5 * (v0 + v1)
    h, w = visible.shape
    bu0 = max(int(round(cu - 0.5 * side)), 0)
    bv0 = max(int(round(cv - 0.5 * side)), 0)
    bu1 = min(bu0 + int(round(side)), w)
    bv1 = min(bv0 + int(round(side)), h)
    return AmodalState(visible, occluded, amodal, (bu0, bv0, bu1, bv1), crop_size)


def _nn_indices(length: int, lo: int, hi: int) -> np.ndarray:
    """Source indices for nearest-neighbor resampling of [lo, hi) to length."""
    return lo + np.floor((np.arange(length) + 0.5) * (hi - lo) / length).astype(np.int64)


def ampr_realign(
    state: AmodalState, observed: RgbXyzMap, cam: CameraModel
) -> tuple[tuple[int, int, int, int], RgbXyzMap, CameraModel]:
    """Crop the observed map to the ROI and build the matching crop camera.

    XYZ values are copied, not re-projected: points keep their camera-frame
    coordinates and only the pixel grid changes.  The crop camera's
    intrinsics are rescaled so normalized rays are preserved exactly.
    """
    u0, v0, u1, v1 = state.box
    size = state.crop_size
    crop_cam = cam.crop_resized(u0, v0, u1, v1, size, size)
    su = _nn_indices(size, u0, u1)
    sv = _nn_indices(size, v0, v1)
    rgb = observed.rgb[np.ix_(sv, su)]
    xyz = observed.xyz[np.ix_(sv, su)]
    valid = observed.valid[np.ix_(sv, su)]
    return state.box, RgbXyzMap(rgb, xyz, valid), crop_cam


def recenter_translation(
    trans: np.ndarray, box: tuple[int, int, int, int], cam: CameraModel
) -> np.ndarray:
    """Move a translation onto the ROI-center ray, keeping its depth."""
    u0, v0, u1, v1 = box
    uc = 0.5 * (u0 + u1) - 0.5
    vc = 0.5 * (v0 + v1) - 0.5
    z = trans[2]
    return np.array([(uc - cam.cx) / cam.fx * z, (vc - cam.cy) / cam.fy * z, z])


@dataclass(frozen=True)
class RefineResult:
    """Refined batch plus per-object diagnostics."""

    batch: HypothesisBatch
    roi_history: dict[int, list[tuple[int, int, int, int]]]
    failures: dict[int, str]


@dataclass
class _ObjectContext:
    rows: np.ndarray
    model: ObjectModel
    observed: RgbXyzMap
    state: AmodalState
    query: RgbXyzMap
    crop_cam: CameraModel

    def realign(self, cam: CameraModel, cfg: RefineConfig) -> None:
        """Recompute the ROI from the (static) masks and re-crop the query.

        Masks do not change during refinement, so this is idempotent; it is
        the hook where an updated occlusion estimate would enter.  Stored
        iteration-0 references assume a stable crop camera, which a static
        ROI guarantees.
        """
        self.state = amodal_state(
            self.state.visible, self.state.occluded, cfg.crop_size, cfg.crop_margin
        )
        _, cropped, self.crop_cam = ampr_realign(self.state, self.observed, cam)
        self.query = _ray_aligned(cropped, self.crop_cam)


def _build_context(
    rows: np.ndarray, frame: FrameLike, model: ObjectModel,
    cam: CameraModel, cfg: RefineConfig,
) -> _ObjectContext:
    visible = np.asarray(frame.visible_mask, dtype=bool)
    occluded = frame.occlusion_mask if cfg.use_amodal else np.zeros_like(visible)
    state = amodal_state(
        visible, occluded, cfg.crop_size, cfg.crop_margin,
        cfg.occlusion_dilation if cfg.use_amodal else 0,
    )
    observed = RgbXyzMap.from_depth(frame.rgb, frame.depth, cam, mask=visible)
    _, cropped, crop_cam = ampr_realign(state, observed, cam)
    query = _ray_aligned(cropped, crop_cam)
    return _ObjectContext(rows, model, observed, state, query, crop_cam)


class _StageSink:
    """Thread-safe accumulator for one iteration's warp and predictor time."""

    def __init__(self) -> None:
        self.lock = threading.Lock()
        self.warp = 0.0
        self.predictor = 0.0

    def add(self, warp: float, predictor: float) -> None:
        with self.lock:
            self.warp += warp
            self.predictor += predictor


def _hypothesis_step(
    ctx: _ObjectContext,
    pose: Pose,
    ref0: RgbXyzMap | None,
    pose0: Pose | None,
    cfg: RefineConfig,
    sink: _StageSink | None = None,
) -> tuple[Pose, float, RgbXyzMap, Pose]:
    """One render/predict/update step for a single hypothesis.

    Returns (new pose, confidence, iteration-0 reference, its pose); on the
    first call the reference is freshly rendered, afterwards the stored
    reference is re-projected to the current pose.
    """
    t0 = time.perf_counter()
    if ref0 is None:
        raw = render_pointcloud(ctx.model, pose, ctx.crop_cam, cfg.warp)
        ref0, pose0 = raw, pose
    else:
        raw = reproject(ref0, pose0, pose, ctx.crop_cam, cfg.warp)
    # The pristine reference keeps exact splatted coordinates (reprojection
    # quality); the predictor sees the ray-aligned view of it.
    reference = _ray_aligned(raw, ctx.crop_cam)
    t1 = time.perf_counter()
    predict = PREDICTORS[cfg.predictor]
    try:
        inc = predict(
            ctx.query,
            reference,
            sigma_scale=cfg.inlier_sigma_scale,
            min_covalid=cfg.min_covalid,
            point_weight=cfg.point_weight,
            gn_iterations=cfg.gn_iterations,
            inlier_floor=cfg.inlier_floor,
            residual_scale=cfg.residual_scale,
            photo_weight=cfg.photo_weight,
            cam=ctx.crop_cam,
            max_points=cfg.max_fit_points,
        )
        rhat = Rotation.from_axis_angle(inc.update.rotation)
        # Predictors return the map-to-map transform; convert its translation
        # into the additive pose update (see module docstring).
        dt = (rhat.rotate(pose.translation) - pose.translation) + inc.update.translation
        applied = IncrementPrediction(
            TangentUpdate(inc.update.rotation, dt), inc.confidence
        )
        new_pose = apply_increment(pose, applied)
        return new_pose, inc.confidence, ref0, pose0
    except (InsufficientOverlapError, ValueError, np.linalg.LinAlgError):
        return pose, 0.0, ref0, pose0
    finally:
        if sink is not None:
            sink.add(t1 - t0, time.perf_counter() - t1)


def refine_batch(
    batch: HypothesisBatch,
    frames: Sequence[FrameLike],
    models: Sequence[ObjectModel],
    cam: CameraModel,
    cfg: RefineConfig,
    mode: str = "batched",
    stage_times: list[dict[str, float]] | None = None,
) -> RefineResult:
    """Refine every hypothesis for cfg.iterations passes.

    Batched mode fans the per-hypothesis steps of each iteration out to a
    thread pool; sequential mode runs the very same step function in a plain
    loop, so both schedules produce bit-identical results.  Objects whose
    ROI cannot be built keep their poses with scores forced to 0; the same
    holds per-hypothesis when the predictor signals insufficient overlap.

    When stage_times is a list, one {"warp_time_s", "predictor_time_s"}
    entry is appended per iteration; timing never influences the poses.
    """
    if mode not in ("batched", "sequential"):
        raise ValueError("mode must be 'batched' or 'sequential'")
    quats = np.array(batch.quats)
    trans = np.array(batch.trans)
    scores = np.array(batch.scores)
    m = len(batch)

    contexts: dict[int, _ObjectContext] = {}
    roi_history: dict[int, list[tuple[int, int, int, int]]] = {}
    failures: dict[int, str] = {}
    for n in batch.object_ids:
        rows = batch.rows_for_object(n)
        try:
            ctx = _build_context(rows, frames[n], models[n], cam, cfg)
        except ValueError as err:
            failures[int(n)] = str(err)
            scores[rows] = 0.0
            continue
        contexts[int(n)] = ctx
        roi_history[int(n)] = [ctx.state.box]
        if cfg.recenter:
            for k in rows:
                trans[k] = recenter_translation(trans[k], ctx.state.box, cam)

    active = [int(k) for ctx in contexts.values() for k in ctx.rows]
    ctx_of = {int(k): ctx for ctx in contexts.values() for k in ctx.rows}
    refs: list[RgbXyzMap | None] = [None] * m
    ref_poses: list[Pose | None] = [None] * m

    sink_cell: list[_StageSink | None] = [None]

    def run_step(k: int) -> None:
        pose = Pose(Rotation(quats[k]), trans[k])
        new_pose, conf, ref0, pose0 = _hypothesis_step(
            ctx_of[k], pose, refs[k], ref_poses[k], cfg, sink_cell[0]
        )
        quats[k] = new_pose.rotation.quat
        trans[k] = new_pose.translation
        scores[k] = conf
        refs[k] = ref0
        ref_poses[k] = pose0

    pool = (
        ThreadPoolExecutor(max_workers=cfg.threads)
        if mode == "batched" and cfg.threads > 1
        else None
    )
    try:
        for iteration in range(cfg.iterations):
            sink_cell[0] = _StageSink() if stage_times is not None else None
            if pool is not None:
                list(pool.map(run_step, active))
            else:
                for k in active:
                    run_step(k)
            if stage_times is not None:
                stage_times.append(
                    {
                        "warp_time_s": sink_cell[0].warp,
                        "predictor_time_s": sink_cell[0].predictor,
                    }
                )
            if cfg.realign_every_iteration:
                # Per-object barrier after every iteration.
                for n, ctx in contexts.items():
                    ctx.realign(cam, cfg)
                    roi_history[n].append(ctx.state.box)
    finally:
        if pool is not None:
            pool.shutdown()

    refined = HypothesisBatch(batch.object_idx, batch.slot_idx, quats, trans, scores)
    return RefineResult(refined, roi_history, failures)


def select_best(batch: HypothesisBatch) -> dict[int, tuple[Pose, float, int]]:
    """Per object, the highest-scoring hypothesis (ties: lowest slot)."""
    out: dict[int, tuple[Pose, float, int]] = {}
    for n in batch.object_ids:
        rows = batch.rows_for_object(n)
        k = rows[int(np.argmax(batch.scores[rows]))]
        out[int(n)] = (batch.pose(k), float(batch.scores[k]), int(batch.slot_idx[k]))
    return out
