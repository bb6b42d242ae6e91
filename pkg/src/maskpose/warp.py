"""RGB-XYZ maps, point splatting, and relative-pose re-projection.

A reference view is kept as paired per-pixel RGB and camera-frame XYZ.  To
move it to a new hypothesis pose the valid pixels are transformed by the
relative rigid motion, projected, and splatted into the destination with a
z-buffer; colors travel with their points unchanged, holes stay invalid, and
nothing is blended so the RGB-XYZ pairing stays strict at every pixel.

Rasterization rules (the only place continuous coordinates become pixels):

* continuous (u, v) rounds half-up to the nearest pixel center;
* each sample covers a square of side 2 * splat_radius + 1 around it;
* per destination pixel the smallest z wins, and candidates within
  depth_tie_epsilon of that minimum resolve to the lowest source index,
  which makes the result independent of candidate order and therefore of
  any parallel work partitioning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from maskpose.geom import CameraModel, Pose, compose, inverse
from maskpose.sampler import ObjectModel

__all__ = [
    "WarpConfig",
    "RgbXyzMap",
    "RoundTripResult",
    "render_pointcloud",
    "render_stack",
    "reproject",
    "reproject_stack",
    "warp_roundtrip_residual",
]


@dataclass(frozen=True)
class WarpConfig:
    splat_radius: int = 1
    depth_tie_epsilon: float = 1e-6

    def __post_init__(self) -> None:
        if not 0 <= self.splat_radius <= 8:
            raise ValueError("splat_radius must be in [0, 8]")
        if self.depth_tie_epsilon <= 0:
            raise ValueError("depth_tie_epsilon must be positive")


@dataclass(frozen=True)
class RgbXyzMap:
    """Per-pixel RGB in [0, 1] paired with camera-frame XYZ in meters.

    Invalid pixels carry all-zero payload; valid pixels have finite XYZ with
    strictly positive depth.  Both are enforced at construction.
    """

    rgb: np.ndarray
    xyz: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        rgb = np.ascontiguousarray(self.rgb, dtype=np.float32)
        xyz = np.ascontiguousarray(self.xyz, dtype=np.float32)
        valid = np.ascontiguousarray(self.valid, dtype=bool)
        if valid.ndim != 2 or rgb.shape != valid.shape + (3,) or xyz.shape != rgb.shape:
            raise ValueError("rgb/xyz must be (H, W, 3) matching a (H, W) valid mask")
        if not np.all(np.isfinite(xyz[valid])) or np.any(xyz[valid][:, 2] <= 0.0):
            raise ValueError("valid pixels must hold finite XYZ with z > 0")
        if np.any(xyz[~valid] != 0.0) or np.any(rgb[~valid] != 0.0):
            raise ValueError("invalid pixels must carry all-zero payload")
        for a in (rgb, xyz, valid):
            a.setflags(write=False)
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    @classmethod
    def empty(cls, height: int, width: int) -> "RgbXyzMap":
        return cls(
            np.zeros((height, width, 3), np.float32),
            np.zeros((height, width, 3), np.float32),
            np.zeros((height, width), bool),
        )

    @classmethod
    def from_depth(
        cls,
        rgb: np.ndarray,
        depth: np.ndarray,
        cam: "CameraModel",
        mask: np.ndarray | None = None,
    ) -> "RgbXyzMap":
        """Build a map from an observed image: back-project every pixel with
        positive finite depth (optionally restricted to `mask`).

        rgb may be uint8 (rescaled to [0, 1]) or float already in [0, 1].
        """
        depth = np.asarray(depth, dtype=np.float64)
        if depth.shape != (cam.height, cam.width):
            raise ValueError("depth does not match camera dimensions")
        rgb = np.asarray(rgb)
        if rgb.dtype == np.uint8:
            rgb = rgb.astype(np.float32) / 255.0
        rgb = rgb.astype(np.float32)
        valid = np.isfinite(depth) & (depth > 0.0)
        if mask is not None:
            valid &= np.asarray(mask, dtype=bool)
        vv, uu = np.indices(depth.shape, dtype=np.float64)
        x = (uu - cam.cx) / cam.fx * depth
        y = (vv - cam.cy) / cam.fy * depth
        xyz = np.where(valid[..., None], np.stack([x, y, depth], axis=-1), 0.0)
        rgb = np.where(valid[..., None], rgb, 0.0)
        return cls(rgb.astype(np.float32), xyz.astype(np.float32), valid)

    def masked(self, mask: np.ndarray) -> "RgbXyzMap":
        """Restrict validity to `mask`, zeroing payload outside it."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != self.valid.shape:
            raise ValueError("mask shape mismatch")
        keep = self.valid & mask
        rgb = np.where(keep[..., None], self.rgb, 0.0).astype(np.float32)
        xyz = np.where(keep[..., None], self.xyz, 0.0).astype(np.float32)
        return RgbXyzMap(rgb, xyz, keep)


@dataclass(frozen=True)
class RoundTripResult:
    mean_residual: float
    survival_fraction: float
    residuals: np.ndarray


def _splat_images(
    sources: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
    cam: CameraModel,
    cfg: WarpConfig,
) -> list[RgbXyzMap]:
    """Z-buffer splat of per-image candidate sets into fresh maps.

    Each source entry is (points, rgb, src_idx): camera-frame float64 points,
    their colors, and the per-image source linear index used for depth ties.
    All images share one camera and are filled in a single fused pass; since
    the winner of a pixel depends only on that pixel's own candidate set, the
    result is identical whether images are splatted together or one by one.
    """
    h, w = cam.height, cam.width
    n = len(sources)
    rgb_out = np.zeros((n, h, w, 3), np.float32)
    xyz_out = np.zeros((n, h, w, 3), np.float32)
    valid_out = np.zeros((n, h, w), bool)

    pts = np.concatenate([s[0] for s in sources]) if n else np.zeros((0, 3))
    if len(pts):
        colors = np.concatenate([s[1] for s in sources])
        src_idx = np.concatenate([s[2] for s in sources]).astype(np.int64)
        image_of = np.repeat(
            np.arange(n, dtype=np.int64), [len(s[0]) for s in sources]
        )

        z = pts[:, 2]
        front = np.isfinite(z) & (z > 0.0)
        pts, colors, src_idx, image_of, z = (
            pts[front], colors[front], src_idx[front], image_of[front], z[front]
        )

    if not len(pts):
        return [
            RgbXyzMap(rgb_out[i], xyz_out[i], valid_out[i]) for i in range(n)
        ]

    u = np.floor(cam.fx * pts[:, 0] / z + cam.cx + 0.5).astype(np.int64)
    v = np.floor(cam.fy * pts[:, 1] / z + cam.cy + 0.5).astype(np.int64)

    r = cfg.splat_radius
    if r > 0:
        side = 2 * r + 1
        du = np.tile(np.arange(-r, r + 1, dtype=np.int64), side)
        dv = np.repeat(np.arange(-r, r + 1, dtype=np.int64), side)
        u = (u[:, None] + du[None, :]).ravel()
        v = (v[:, None] + dv[None, :]).ravel()
        rows = np.repeat(np.arange(len(pts), dtype=np.int64), side * side)
    else:
        rows = np.arange(len(pts), dtype=np.int64)

    inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
    u, v, rows = u[inside], v[inside], rows[inside]
    if not len(rows):
        return [RgbXyzMap(rgb_out[i], xyz_out[i], valid_out[i]) for i in range(n)]

    key = (image_of[rows] * h + v) * w + u
    order = np.argsort(key, kind="stable")
    key_s = key[order]
    rows_s = rows[order]
    z_s = z[rows_s]

    starts = np.flatnonzero(np.concatenate(([True], key_s[1:] != key_s[:-1])))
    counts = np.diff(np.append(starts, len(key_s)))
    zmin = np.minimum.reduceat(z_s, starts)
    in_window = z_s <= np.repeat(zmin, counts) + cfg.depth_tie_epsilon

    # Choose the lowest in-window source index per pixel; encode the sorted
    # candidate position alongside so the winner's payload row falls out of
    # the same minimum.  The sentinel keeps out-of-window entries losing.
    m = len(key_s)
    sentinel = np.int64(src_idx.max()) + 1
    ranked = np.where(in_window, src_idx[rows_s], sentinel) * np.int64(m + 1)
    ranked += np.arange(m, dtype=np.int64)
    win_pos = np.minimum.reduceat(ranked, starts) % np.int64(m + 1)
    win_rows = rows_s[win_pos]

    slots = key_s[starts]
    rgb_out.reshape(-1, 3)[slots] = colors[win_rows]
    xyz_out.reshape(-1, 3)[slots] = pts[win_rows].astype(np.float32)
    valid_out.reshape(-1)[slots] = True
    return [RgbXyzMap(rgb_out[i], xyz_out[i], valid_out[i]) for i in range(n)]


def render_stack(
    model: ObjectModel, poses: list[Pose], cam: CameraModel, cfg: WarpConfig
) -> list[RgbXyzMap]:
    """Render one model at several poses in a single splat pass."""
    idx = np.arange(len(model.points), dtype=np.int64)
    sources = [(pose.transform(model.points), model.colors, idx) for pose in poses]
    return _splat_images(sources, cam, cfg)


def render_pointcloud(
    model: ObjectModel, pose: Pose, cam: CameraModel, cfg: WarpConfig
) -> RgbXyzMap:
    """Full point render of a model into an RGB-XYZ map (XYZ in camera frame)."""
    return render_stack(model, [pose], cam, cfg)[0]


def _map_source(src: RgbXyzMap, relative: Pose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    flat_valid = src.valid.reshape(-1)
    idx = np.flatnonzero(flat_valid)
    pts = relative.transform(src.xyz.reshape(-1, 3)[idx].astype(np.float64))
    return pts, src.rgb.reshape(-1, 3)[idx], idx


def reproject_stack(
    srcs: list[RgbXyzMap],
    src_poses: list[Pose],
    dst_poses: list[Pose],
    cam: CameraModel,
    cfg: WarpConfig,
) -> list[RgbXyzMap]:
    """Warp several maps by their relative poses in one fused splat pass."""
    sources = []
    for src, sp, dp in zip(srcs, src_poses, dst_poses):
        if src.shape != (cam.height, cam.width):
            raise ValueError("source map does not match camera dimensions")
        sources.append(_map_source(src, compose(dp, inverse(sp))))
    return _splat_images(sources, cam, cfg)


def reproject(
    src: RgbXyzMap, src_pose: Pose, dst_pose: Pose, cam: CameraModel, cfg: WarpConfig
) -> RgbXyzMap:
    """Re-project a map from the view at src_pose to the view at dst_pose.

    Valid pixels move rigidly by dst_pose o inverse(src_pose); each keeps its
    color, z-buffering handles occlusion, and uncovered destination pixels
    remain invalid.
    """
    return reproject_stack([src], [src_pose], [dst_pose], cam, cfg)[0]


def warp_roundtrip_residual(src: RgbXyzMap, delta: Pose, cam: CameraModel) -> RoundTripResult:
    """Warp by delta and back, then compare survivors to the original map.

    Uses splat radius 0 so the measurement isolates re-rasterization loss;
    survival counts pixels that stay valid through both warps relative to the
    source's valid count.  Large deltas legitimately lose most pixels to the
    frustum or self-occlusion; that shows up in survival_fraction rather than
    as an error.
    """
    cfg = WarpConfig(splat_radius=0, depth_tie_epsilon=1e-6)
    ident = Pose.identity()
    forward = reproject(src, ident, delta, cam, cfg)
    back = reproject(forward, delta, ident, cam, cfg)
    surviving = src.valid & back.valid
    n_valid = int(src.valid.sum())
    if n_valid == 0:
        raise ValueError("source map has no valid pixels")
    residuals = np.linalg.norm(
        back.xyz[surviving].astype(np.float64) - src.xyz[surviving].astype(np.float64),
        axis=1,
    )
    mean = float(residuals.mean()) if len(residuals) else float("nan")
    return RoundTripResult(mean, float(surviving.sum() / n_valid), residuals)
