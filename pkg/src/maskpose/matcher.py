"""Mask-gated patch matching between a query view and rendered references.

Images are divided into a grid of square patches (stride s, complete patches
only); each patch carries a feature vector and a binary mask bit obtained by
majority vote over its pixels, ties counting as true.  Similarity between a
query patch and a reference patch is the plain inner product of their
features, gated by both mask bits, so anything outside either mask scores
exactly zero.  Features are deliberately not length-normalized: magnitude is
part of the signal.

Learned descriptors plug in as FeatureMap inputs.  For ground-truth-driven
testing an oracle extractor emits the object-frame coordinates of each patch
plus a norm-completion channel, which makes inner-product nearest neighbors
coincide with nearest object points and therefore makes matching analytically
checkable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from maskpose.geom import CameraModel, Pose
from maskpose.warp import RgbXyzMap

__all__ = [
    "FeatureMap",
    "CorrespondenceSet",
    "patch_grid",
    "downsample_mask",
    "masked_similarity",
    "assign_nn",
    "lift",
    "lift_from_centers",
    "template_patch_centers",
    "oracle_features_from_map",
    "oracle_features_from_depth",
]


def patch_grid(height: int, width: int, stride: int) -> tuple[int, int]:
    """Grid shape covering an image with complete stride x stride patches."""
    if stride <= 0:
        raise ValueError("stride must be positive")
    h0, w0 = height // stride, width // stride
    if h0 == 0 or w0 == 0:
        raise ValueError("image smaller than one patch")
    return h0, w0


@dataclass(frozen=True)
class FeatureMap:
    """Per-patch feature vectors on the grid implied by patch_stride."""

    data: np.ndarray
    patch_stride: int

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError("feature data must be (H0, W0, C)")
        if self.patch_stride <= 0:
            raise ValueError("patch_stride must be positive")
        if not np.all(np.isfinite(data)):
            raise ValueError("features must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1, self.data.shape[2])


@dataclass(frozen=True)
class CorrespondenceSet:
    """Matched query/template patches lifted to paired 3D points.

    query_points are camera-frame back-projections of the query patches;
    template_points are the template's rendered XYZ sampled at the matched
    patch centers, i.e. coordinates in the camera frame of the hypothesis
    view, which is what makes centered-residual rigidity scoring sensitive
    to the hypothesis rotation.
    """

    query_points: np.ndarray
    template_points: np.ndarray
    weights: np.ndarray
    query_patches: np.ndarray
    template_patches: np.ndarray

    def __post_init__(self) -> None:
        q = np.ascontiguousarray(self.query_points, dtype=np.float64)
        t = np.ascontiguousarray(self.template_points, dtype=np.float64)
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        qi = np.ascontiguousarray(self.query_patches, dtype=np.int64)
        ti = np.ascontiguousarray(self.template_patches, dtype=np.int64)
        n = len(w)
        if q.shape != (n, 3) or t.shape != (n, 3) or qi.shape != (n,) or ti.shape != (n,):
            raise ValueError("inconsistent correspondence array lengths")
        if n and (w.min() < 0 or not np.all(np.isfinite(w))):
            raise ValueError("weights must be finite and nonnegative")
        if n and (qi.min() < 0 or ti.min() < 0):
            raise ValueError("patch ids must be nonnegative")
        for a in (q, t, w, qi, ti):
            a.setflags(write=False)
        object.__setattr__(self, "query_points", q)
        object.__setattr__(self, "template_points", t)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "query_patches", qi)
        object.__setattr__(self, "template_patches", ti)

    def __len__(self) -> int:
        return len(self.weights)


def downsample_mask(mask: np.ndarray, stride: int, grid: tuple[int, int]) -> np.ndarray:
    """Majority-vote a pixel mask onto the patch grid; exact ties become True."""
    h0, w0 = grid
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[0] < h0 * stride or mask.shape[1] < w0 * stride:
        raise ValueError("mask smaller than the patch grid")
    blocks = mask[: h0 * stride, : w0 * stride].reshape(h0, stride, w0, stride)
    counts = blocks.sum(axis=(1, 3))
    return counts * 2 >= stride * stride


def masked_similarity(
    query_features: FeatureMap,
    query_mask: np.ndarray,
    ref_features: FeatureMap,
    ref_mask: np.ndarray,
) -> np.ndarray:
    """Dense similarity matrix S[i, j] = m_q(i) * m_r(j) * <f_q(i), f_r(j)>.

    Masks are full-resolution pixel masks, downsampled here by majority vote.
    Entries gated off by either mask are exactly 0.0.
    """
    if query_features.channels != ref_features.channels:
        raise ValueError("feature channel mismatch")
    mq = downsample_mask(query_mask, query_features.patch_stride, query_features.grid)
    mr = downsample_mask(ref_mask, ref_features.patch_stride, ref_features.grid)
    s = query_features.flat() @ ref_features.flat().T
    gate = mq.reshape(-1)[:, None] & mr.reshape(-1)[None, :]
    s[~gate] = 0.0
    return s


def assign_nn(similarity: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per query row, the best reference column.

    Rows with no strictly positive entry are dropped.  Ties resolve to the
    lowest column index (argmax first occurrence).  Returns (query ids,
    reference ids, weights) where weights are the winning similarities.
    """
    s = np.asarray(similarity, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError("similarity must be 2D")
    best = s.argmax(axis=1)
    w = s[np.arange(len(s)), best]
    keep = w > 0.0
    return np.flatnonzero(keep), best[keep], w[keep]


def _lower_median(values: np.ndarray) -> float:
    v = np.sort(np.asarray(values).ravel())
    return float(v[(len(v) - 1) // 2])


def _patch_center(patch_id: int, grid_w: int, stride: int) -> tuple[int, int]:
    r, c = divmod(patch_id, grid_w)
    return c * stride + stride // 2, r * stride + stride // 2


def template_patch_centers(
    template: RgbXyzMap, stride: int
) -> tuple[np.ndarray, np.ndarray]:
    """XYZ and validity of every patch-center pixel of a rendered template."""
    h0, w0 = patch_grid(*template.shape, stride)
    vs = np.arange(h0) * stride + stride // 2
    us = np.arange(w0) * stride + stride // 2
    xyz = template.xyz[np.ix_(vs, us)].reshape(-1, 3).astype(np.float64)
    valid = template.valid[np.ix_(vs, us)].reshape(-1)
    return xyz, valid


def lift_query_patches(
    query_depth: np.ndarray,
    cam: CameraModel,
    stride: int,
    query_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Back-project every query patch once: center pixel at the lower-median
    valid (optionally masked) depth inside the patch.

    Returns (points (P, 3), valid (P,)) over the patch grid in row-major
    order; patches without valid depth carry zeros and valid=False.  Matches
    the per-pair sampling of lift_from_centers exactly, so callers matching
    one query against many templates can lift once and gather per template.
    """
    depth = np.asarray(query_depth, dtype=np.float64)
    h0, w0 = patch_grid(depth.shape[0], depth.shape[1], stride)
    usable = np.isfinite(depth) & (depth > 0.0)
    if query_mask is not None:
        usable &= np.asarray(query_mask, dtype=bool)

    points = np.zeros((h0 * w0, 3))
    valid = np.zeros(h0 * w0, dtype=bool)
    for pid in range(h0 * w0):
        r, c = divmod(pid, w0)
        block = usable[r * stride : (r + 1) * stride, c * stride : (c + 1) * stride]
        if not block.any():
            continue
        z = _lower_median(
            depth[r * stride : (r + 1) * stride, c * stride : (c + 1) * stride][block]
        )
        u, v = _patch_center(pid, w0, stride)
        points[pid] = cam.backproject(float(u), float(v), z)
        valid[pid] = True
    return points, valid


def gather_correspondences(
    pairs: tuple[np.ndarray, np.ndarray, np.ndarray],
    query_points: np.ndarray,
    query_valid: np.ndarray,
    centers_xyz: np.ndarray,
    centers_valid: np.ndarray,
) -> CorrespondenceSet:
    """Assemble lifted correspondences from precomputed per-patch points.

    Drops pairs whose query patch has no valid depth or whose template
    center is invalid, mirroring lift_from_centers.
    """
    qi, ti, w = pairs
    qi = np.asarray(qi, dtype=np.int64)
    ti = np.asarray(ti, dtype=np.int64)
    keep = query_valid[qi] & centers_valid[ti]
    qi, ti = qi[keep], ti[keep]
    return CorrespondenceSet(
        query_points[qi].reshape(-1, 3),
        np.asarray(centers_xyz, dtype=np.float64)[ti].reshape(-1, 3),
        np.asarray(w, dtype=np.float64)[keep],
        qi,
        ti,
    )


def lift_from_centers(
    pairs: tuple[np.ndarray, np.ndarray, np.ndarray],
    query_depth: np.ndarray,
    cam: CameraModel,
    centers_xyz: np.ndarray,
    centers_valid: np.ndarray,
    query_stride: int,
    query_mask: np.ndarray | None = None,
) -> CorrespondenceSet:
    """Lift matched patch pairs to 3D given precomputed template centers.

    The query point of a pair is the back-projection of the query patch's
    center pixel at the lower-median valid depth inside the patch (restricted
    to query_mask when one is supplied, which keeps correspondences invariant
    to clutter outside the mask).  Pairs without valid query depth or with an
    invalid template center are dropped.
    """
    qi, ti, w = pairs
    depth = np.asarray(query_depth, dtype=np.float64)
    h0, w0 = patch_grid(depth.shape[0], depth.shape[1], query_stride)
    usable = np.isfinite(depth) & (depth > 0.0)
    if query_mask is not None:
        usable &= np.asarray(query_mask, dtype=bool)

    q_pts, t_pts, weights, q_ids, t_ids = [], [], [], [], []
    for i, j, wij in zip(qi, ti, w):
        if not centers_valid[j]:
            continue
        r, c = divmod(int(i), w0)
        block = usable[r * query_stride : (r + 1) * query_stride,
                       c * query_stride : (c + 1) * query_stride]
        if not block.any():
            continue
        z = _lower_median(
            depth[r * query_stride : (r + 1) * query_stride,
                  c * query_stride : (c + 1) * query_stride][block]
        )
        u, v = _patch_center(int(i), w0, query_stride)
        q_pts.append(cam.backproject(float(u), float(v), z))
        t_pts.append(centers_xyz[j])
        weights.append(wij)
        q_ids.append(i)
        t_ids.append(j)

    return CorrespondenceSet(
        np.array(q_pts).reshape(-1, 3),
        np.array(t_pts).reshape(-1, 3),
        np.array(weights, dtype=np.float64),
        np.array(q_ids, dtype=np.int64),
        np.array(t_ids, dtype=np.int64),
    )


def lift(
    pairs: tuple[np.ndarray, np.ndarray, np.ndarray],
    query_depth: np.ndarray,
    cam: CameraModel,
    template: RgbXyzMap,
    query_stride: int,
    template_stride: int,
    query_mask: np.ndarray | None = None,
) -> CorrespondenceSet:
    """Lift matched patch pairs into paired 3D points (see lift_from_centers)."""
    centers_xyz, centers_valid = template_patch_centers(template, template_stride)
    return lift_from_centers(
        pairs, query_depth, cam, centers_xyz, centers_valid, query_stride, query_mask
    )


def _norm_completion(obj_points: np.ndarray, radius_bound: float) -> np.ndarray:
    """Append sqrt(M^2 - |x|^2) so all features share norm M and inner-product
    argmax equals nearest-point argmax."""
    sq = radius_bound * radius_bound - np.einsum("ij,ij->i", obj_points, obj_points)
    return np.concatenate([obj_points, np.sqrt(np.maximum(sq, 0.0))[:, None]], axis=1)


def oracle_features_from_map(
    template: RgbXyzMap, pose: Pose, stride: int, diameter: float
) -> FeatureMap:
    """Ground-truth features for a rendered view: object-frame coordinates of
    each patch-center pixel, norm-completed; zero where the center is invalid."""
    xyz, valid = template_patch_centers(template, stride)
    h0, w0 = patch_grid(*template.shape, stride)
    rot_inv = pose.rotation.inverse()
    obj = rot_inv.rotate(xyz - pose.translation)
    feats = _norm_completion(obj, diameter)
    feats[~valid] = 0.0
    return FeatureMap(feats.reshape(h0, w0, 4), stride)


def oracle_features_from_depth(
    depth: np.ndarray,
    mask: np.ndarray,
    cam: CameraModel,
    pose: Pose,
    stride: int,
    diameter: float,
) -> FeatureMap:
    """Ground-truth features for an observed view.

    Uses the same sampling convention as lift (patch-center pixel at the
    lower-median masked depth) so that a patch's feature and its lifted 3D
    point describe the same surface location.
    """
    depth = np.asarray(depth, dtype=np.float64)
    h0, w0 = patch_grid(depth.shape[0], depth.shape[1], stride)
    usable = np.isfinite(depth) & (depth > 0.0) & np.asarray(mask, dtype=bool)
    rot_inv = pose.rotation.inverse()
    feats = np.zeros((h0 * w0, 4))
    for pid in range(h0 * w0):
        r, c = divmod(pid, w0)
        block = usable[r * stride : (r + 1) * stride, c * stride : (c + 1) * stride]
        if not block.any():
            continue
        z = _lower_median(depth[r * stride : (r + 1) * stride, c * stride : (c + 1) * stride][block])
        u, v = _patch_center(pid, w0, stride)
        obj = rot_inv.rotate(cam.backproject(float(u), float(v), z) - pose.translation)
        feats[pid] = _norm_completion(obj[None, :], diameter)[0]
    return FeatureMap(feats.reshape(h0, w0, 4), stride)
