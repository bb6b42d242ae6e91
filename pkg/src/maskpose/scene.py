"""Procedural synthetic scenes.

Desk-scale stand-ins for benchmark data: procedural point-cloud objects
(cube, sphere, L-prism, each with several thousand surface points and a
position-affine color texture) are placed at seeded random poses in front
of a default camera.  Every object is rendered solo for its amodal mask,
then all bodies are composited with per-pixel z-buffering to produce the
observed RGB and depth together with per-object visible masks.  An
optional occluder slides toward a target object until it hides a requested
fraction of the target's silhouette.

Lateral placement uses a fixed grid of image slots with small jitter, so
multiple target objects never overlap each other; only the dedicated
occluder intersects a target's silhouette.
"""

from dataclasses import dataclass, field

import numpy as np

from maskpose.geom import CameraModel, Pose, Rotation
from maskpose.sampler import ObjectModel
from maskpose.warp import RgbXyzMap, WarpConfig, render_pointcloud

DEFAULT_CAMERA = CameraModel(
    fx=320.0, fy=320.0, cx=159.5, cy=119.5, width=320, height=240,
    depth_scale=0.001,
)

_SLOTS = ((64, 60), (160, 60), (256, 60), (64, 180), (160, 180), (256, 180))
_SLOT_JITTER_PX = 4.0
_GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


class SceneError(ValueError):
    """A scene specification cannot be realized (fit or occlusion failure)."""


def _affine_colors(points: np.ndarray, span: float) -> np.ndarray:
    """Position-affine texture: each channel is a linear ramp along one axis."""
    return np.clip(0.5 + points / span, 0.0, 1.0).astype(np.float32)


def _box_faces(lo: np.ndarray, hi: np.ndarray, grid: int) -> list[np.ndarray]:
    """Six grid x grid point sheets, one per face of an axis-aligned box."""
    t = (np.arange(grid) + 0.5) / grid
    faces = []
    for axis in range(3):
        a, b = (axis + 1) % 3, (axis + 2) % 3
        ga = lo[a] + t * (hi[a] - lo[a])
        gb = lo[b] + t * (hi[b] - lo[b])
        aa, bb = np.meshgrid(ga, gb, indexing="ij")
        for bound in (lo[axis], hi[axis]):
            pts = np.zeros((grid * grid, 3))
            pts[:, axis] = bound
            pts[:, a] = aa.ravel()
            pts[:, b] = bb.ravel()
            faces.append(pts)
    return faces


def cube_model(side: float = 0.15, grid: int = 32, identifier: str = "cube") -> ObjectModel:
    """Cube surface sampled on a per-face grid (6 * grid^2 points)."""
    if side <= 0 or grid < 2:
        raise ValueError("side must be positive and grid at least 2")
    h = side / 2.0
    pts = np.concatenate(_box_faces(np.array([-h, -h, -h]), np.array([h, h, h]), grid))
    return ObjectModel(pts, _affine_colors(pts, side), identifier=identifier)


def sphere_model(
    radius: float = 0.09, count: int = 6000, identifier: str = "sphere"
) -> ObjectModel:
    """Fibonacci-spiral sphere surface."""
    if radius <= 0 or count < 16:
        raise ValueError("radius must be positive and count at least 16")
    i = np.arange(count)
    z = 1.0 - 2.0 * (i + 0.5) / count
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    phi = i * _GOLDEN_ANGLE
    pts = radius * np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return ObjectModel(pts, _affine_colors(pts, 2.0 * radius), identifier=identifier)


def l_prism_model(
    size: float = 0.15, grid: int = 24, identifier: str = "lprism"
) -> ObjectModel:
    """L-shaped prism: a top bar over a bottom-left leg, extruded along z.

    Built from two boxes sharing the y = 0 plane; the shared interface
    sheets are dropped so only true surface points remain, except the
    exposed part of the bar's underside (the inner step).
    """
    if size <= 0 or grid < 2:
        raise ValueError("size must be positive and grid at least 2")
    h, d = size / 2.0, size / 4.0
    bar = _box_faces(np.array([-h, 0.0, -d]), np.array([h, h, d]), grid)
    leg = _box_faces(np.array([-h, -h, -d]), np.array([0.0, 0.0, d]), grid)
    # Face order from _box_faces: for axis a, (low, high) bounds; y faces are
    # entries 2 (y=lo) and 3 (y=hi).  The bar's y=0 face is kept only where
    # it overhangs the leg (x >= 0); the leg's y=0 face is fully interior.
    bar_bottom = bar[2]
    bar[2] = bar_bottom[bar_bottom[:, 0] >= 0.0]
    del leg[3]
    pts = np.concatenate(bar + leg)
    return ObjectModel(pts, _affine_colors(pts, size), identifier=identifier)


MODEL_BUILDERS = {
    "cube": cube_model,
    "sphere": sphere_model,
    "lprism": l_prism_model,
}


def make_model(kind: str, identifier: str | None = None) -> ObjectModel:
    """Build a procedural model by kind name with default dimensions."""
    if kind not in MODEL_BUILDERS:
        raise ValueError(f"unknown model kind {kind!r}")
    return MODEL_BUILDERS[kind](identifier=identifier or kind)


@dataclass(frozen=True)
class SceneSpec:
    """What to place in a synthetic scene.

    occluded_object selects which target (by index) gets an occluder placed
    in front of it, hiding occlusion_fraction of its silhouette to within
    occlusion_tolerance; None disables occlusion.  The occluder is a cube
    with side occluder_scale times the target diameter, placed at
    three-quarters of the target depth.
    """

    objects: tuple[str, ...] = ("cube",)
    camera: CameraModel = DEFAULT_CAMERA
    occluded_object: int | None = None
    occlusion_fraction: float = 0.4
    occlusion_tolerance: float = 0.05
    occluder_scale: float = 0.8
    depth_range: tuple[float, float] = (0.95, 1.25)
    margin_px: int = 10
    max_tries: int = 50
    warp: WarpConfig = field(default_factory=WarpConfig)

    def __post_init__(self) -> None:
        if len(self.objects) == 0:
            raise ValueError("scene needs at least one object")
        if len(self.objects) > len(_SLOTS):
            raise SceneError(
                f"cannot fit {len(self.objects)} objects; at most {len(_SLOTS)}"
            )
        for kind in self.objects:
            if kind not in MODEL_BUILDERS:
                raise ValueError(f"unknown model kind {kind!r}")
        if self.occluded_object is not None and not (
            0 <= self.occluded_object < len(self.objects)
        ):
            raise ValueError("occluded_object out of range")
        if not 0.0 < self.occlusion_fraction < 1.0:
            raise ValueError("occlusion_fraction must be in (0, 1)")
        if self.occlusion_tolerance <= 0:
            raise ValueError("occlusion_tolerance must be positive")
        if self.occluder_scale <= 0:
            raise ValueError("occluder_scale must be positive")
        lo, hi = self.depth_range
        if not 0 < lo <= hi:
            raise ValueError("depth_range must be ascending and positive")
        if self.margin_px < 0 or self.max_tries < 1:
            raise ValueError("margin_px must be >= 0 and max_tries >= 1")


@dataclass(frozen=True)
class SyntheticScene:
    """A generated scene: models, ground truth, rasters, and masks."""

    seed: int
    camera: CameraModel
    models: tuple[ObjectModel, ...]
    poses: tuple[Pose, ...]
    rgb: np.ndarray
    depth: np.ndarray
    visible_masks: tuple[np.ndarray, ...]
    amodal_masks: tuple[np.ndarray, ...]
    occlusion_fractions: tuple[float, ...]
    occluder_models: tuple[ObjectModel, ...] = ()
    occluder_poses: tuple[Pose, ...] = ()

    def __post_init__(self) -> None:
        for vis, amod in zip(self.visible_masks, self.amodal_masks):
            if np.any(vis & ~amod):
                raise ValueError("visible mask must be a subset of the amodal mask")


def _place_object(
    model: ObjectModel,
    slot: tuple[int, int],
    spec: SceneSpec,
    rng: np.random.Generator,
    index: int,
) -> Pose:
    cam = spec.camera
    m = spec.margin_px
    for _ in range(spec.max_tries):
        rot = Rotation.random(rng)
        z = rng.uniform(*spec.depth_range)
        u = slot[0] + rng.uniform(-_SLOT_JITTER_PX, _SLOT_JITTER_PX)
        v = slot[1] + rng.uniform(-_SLOT_JITTER_PX, _SLOT_JITTER_PX)
        center = cam.backproject(u, v, z)
        pose = Pose(rot, center)
        uv, ok = cam.project(pose.transform(model.points))
        if not np.all(ok):
            continue
        inside = (
            (uv[:, 0] >= m) & (uv[:, 0] <= cam.width - 1 - m)
            & (uv[:, 1] >= m) & (uv[:, 1] <= cam.height - 1 - m)
        )
        if np.all(inside):
            return pose
    raise SceneError(
        f"object {index} ({model.identifier}) cannot fit in frame "
        f"after {spec.max_tries} tries"
    )


def _occluded_fraction(target: RgbXyzMap, occluder: RgbXyzMap) -> float:
    silhouette = int(target.valid.sum())
    if silhouette == 0:
        return 0.0
    front = target.valid & occluder.valid & (
        occluder.xyz[..., 2] < target.xyz[..., 2]
    )
    return float(front.sum()) / silhouette


def _place_occluder(
    target_map: RgbXyzMap,
    target_pose: Pose,
    target_diameter: float,
    spec: SceneSpec,
    rng: np.random.Generator,
) -> tuple[ObjectModel, Pose]:
    """Slide a cube along a seeded image direction until it hides the
    requested fraction of the target silhouette."""
    cam = spec.camera
    occluder = cube_model(
        side=spec.occluder_scale * target_diameter, identifier="occluder"
    )
    rot = Rotation.random(rng)
    z = max(0.75 * target_pose.translation[2], 0.35)
    uv_center, _ = cam.project(target_pose.translation[None, :])
    uc, vc = uv_center[0]
    theta = rng.uniform(0.0, 2.0 * np.pi)
    du, dv = np.cos(theta), np.sin(theta)

    def at_offset(px: float) -> tuple[Pose, float]:
        center = cam.backproject(uc + px * du, vc + px * dv, z)
        pose = Pose(rot, center)
        rendered = render_pointcloud(occluder, pose, cam, spec.warp)
        return pose, _occluded_fraction(target_map, rendered)

    want, tol = spec.occlusion_fraction, spec.occlusion_tolerance
    lo, hi = 0.0, 250.0
    pose, frac = at_offset(lo)
    if frac < want - tol:
        raise SceneError(
            f"occluder reaches only {frac:.3f} occlusion at the target center; "
            f"requested {want:.3f}"
        )
    if abs(frac - want) <= tol:
        return occluder, pose
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        pose, frac = at_offset(mid)
        if abs(frac - want) <= 0.8 * tol:
            return occluder, pose
        if frac > want:
            lo = mid
        else:
            hi = mid
    raise SceneError(
        f"occlusion search did not settle within tolerance (last {frac:.3f})"
    )


def _composite(
    maps: list[RgbXyzMap],
) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    depth_stack = np.stack(
        [np.where(m.valid, m.xyz[..., 2].astype(np.float64), np.inf) for m in maps]
    )
    winner = depth_stack.argmin(axis=0)
    nearest = depth_stack.min(axis=0)
    any_valid = np.isfinite(nearest)
    depth = np.where(any_valid, nearest, 0.0)
    h, w = any_valid.shape
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    visible = []
    for b, m in enumerate(maps):
        sel = any_valid & (winner == b)
        rgb[sel] = np.clip(np.round(m.rgb[sel] * 255.0), 0, 255).astype(np.uint8)
        visible.append(sel)
    return rgb, depth, visible


def generate_scene(spec: SceneSpec, seed: int) -> SyntheticScene:
    """Realize a scene specification with a seeded generator.

    The same spec and seed always produce byte-identical rasters and masks.
    """
    rng = np.random.default_rng(seed)
    cam = spec.camera
    slot_order = rng.permutation(len(_SLOTS))[: len(spec.objects)]

    models, poses = [], []
    for i, kind in enumerate(spec.objects):
        model = make_model(kind, identifier=f"{kind}_{i}")
        models.append(model)
        poses.append(_place_object(model, _SLOTS[slot_order[i]], spec, rng, i))

    solo = [
        render_pointcloud(model, pose, cam, spec.warp)
        for model, pose in zip(models, poses)
    ]

    occluder_models: tuple[ObjectModel, ...] = ()
    occluder_poses: tuple[Pose, ...] = ()
    body_maps = list(solo)
    if spec.occluded_object is not None:
        t = spec.occluded_object
        occ_model, occ_pose = _place_occluder(
            solo[t], poses[t], models[t].diameter, spec, rng
        )
        occluder_models = (occ_model,)
        occluder_poses = (occ_pose,)
        body_maps.append(render_pointcloud(occ_model, occ_pose, cam, spec.warp))

    rgb, depth, visible = _composite(body_maps)
    visible_masks = tuple(visible[: len(models)])
    amodal_masks = tuple(m.valid for m in solo)
    fractions = tuple(
        1.0 - float(v.sum()) / float(a.sum()) if a.sum() else 0.0
        for v, a in zip(visible_masks, amodal_masks)
    )

    return SyntheticScene(
        seed=seed,
        camera=cam,
        models=tuple(models),
        poses=tuple(poses),
        rgb=rgb,
        depth=depth,
        visible_masks=visible_masks,
        amodal_masks=amodal_masks,
        occlusion_fractions=fractions,
        occluder_models=occluder_models,
        occluder_poses=occluder_poses,
    )
