"""Rotation-hypothesis sampling.

Viewpoints come from subdividing an icosahedron and projecting onto the unit
sphere, giving 10 * 4**L + 2 near-uniform view directions at level L.  Each
vertex is turned into a look-at rotation toward the object origin, optionally
filtered by a visibility threshold, then multiplied by a sweep of in-plane
rotations about the object z axis.  Hypothesis order is deterministic:
vertices sort lexicographically on quantized coordinates and the in-plane
sweep is ascending, view-major.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from maskpose.geom import Pose, Rotation

__all__ = [
    "SamplerConfig",
    "ObjectModel",
    "compute_diameter",
    "icosphere",
    "sample_viewpoints",
    "filter_visible",
    "augment_in_plane",
    "template_pose",
]

_PHI = (1.0 + np.sqrt(5.0)) / 2.0

_ICO_VERTS = np.array(
    [
        [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
        [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
        [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
    ],
    dtype=np.float64,
)

_ICO_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)


@dataclass(frozen=True)
class SamplerConfig:
    """Knobs for hypothesis generation.

    visibility_sigma None disables the visibility filter entirely (distinct
    from 0.0, which keeps only views whose camera sits at non-negative z).
    """

    subdivision_level: int = 1
    in_plane_step: float = np.pi / 3.0
    visibility_sigma: float | None = None
    depth_alpha: float = 10.0

    def __post_init__(self) -> None:
        if self.subdivision_level < 0:
            raise ValueError("subdivision_level must be >= 0")
        if not (0.0 < self.in_plane_step <= 2.0 * np.pi):
            raise ValueError("in_plane_step must be in (0, 2*pi]")
        turns = 2.0 * np.pi / self.in_plane_step
        if abs(turns - round(turns)) > 1e-9:
            raise ValueError("in_plane_step must divide 2*pi")
        if self.depth_alpha <= 0:
            raise ValueError("depth_alpha must be positive")

    @property
    def in_plane_count(self) -> int:
        return int(round(2.0 * np.pi / self.in_plane_step))


def compute_diameter(points: np.ndarray) -> float:
    """Largest pairwise distance in a point set.

    Uses the convex hull to prune candidates; falls back to (subsampled)
    brute force for degenerate sets the hull cannot handle.
    """
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        return 0.0
    candidates = pts
    if len(pts) > 16:
        try:
            from scipy.spatial import ConvexHull

            candidates = pts[ConvexHull(pts).vertices]
        except Exception:
            if len(pts) > 4000:
                candidates = pts[:: int(np.ceil(len(pts) / 4000))]
    sq = np.einsum("ij,ij->i", candidates, candidates)
    best = 0.0
    chunk = max(1, int(8_000_000 // max(len(candidates), 1)))
    for start in range(0, len(candidates), chunk):
        block = candidates[start : start + chunk]
        d2 = sq[start : start + chunk, None] + sq[None, :] - 2.0 * (block @ candidates.T)
        best = max(best, float(d2.max()))
    return float(np.sqrt(max(best, 0.0)))


@dataclass(frozen=True)
class ObjectModel:
    """A colored point cloud with a known diameter.

    points are meters in the object frame, colors are float RGB in [0, 1].
    With validate=True (the default) the model must contain at least four
    non-coplanar points and any supplied diameter is checked against the
    actual max pairwise distance; validate=False admits degenerate fixtures
    used for metric evaluation only.
    """

    points: np.ndarray
    colors: np.ndarray | None = None
    diameter: float | None = None
    identifier: str = "object"
    validate: bool = field(default=True, repr=False)

    def __post_init__(self) -> None:
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or not np.all(np.isfinite(pts)):
            raise ValueError("points must be a finite (N, 3) array")
        colors = self.colors
        if colors is None:
            colors = np.full((len(pts), 3), 0.5, dtype=np.float32)
        colors = np.ascontiguousarray(colors, dtype=np.float32)
        if colors.shape != pts.shape:
            raise ValueError("colors must match points shape")
        if colors.min() < 0.0 or colors.max() > 1.0:
            raise ValueError("colors must lie in [0, 1]")
        if self.validate:
            if len(pts) < 4:
                raise ValueError("model needs at least 4 points")
            centered = pts - pts.mean(axis=0)
            if np.linalg.matrix_rank(centered, tol=1e-9) < 3:
                raise ValueError("model points are coplanar")
        diameter = self.diameter
        if diameter is None:
            diameter = compute_diameter(pts)
        elif self.validate:
            actual = compute_diameter(pts)
            if abs(actual - diameter) > 1e-6:
                raise ValueError(
                    f"stated diameter {diameter} differs from measured {actual}"
                )
        if diameter <= 0 and self.validate:
            raise ValueError("diameter must be positive")
        pts.setflags(write=False)
        colors.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "colors", colors)
        object.__setattr__(self, "diameter", float(diameter))


def icosphere(level: int) -> np.ndarray:
    """Unit-sphere vertices of a subdivided icosahedron, 10 * 4**level + 2 of
    them, in lexicographic order of their quantized coordinates."""
    verts = [v / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = [tuple(f) for f in _ICO_FACES]
    for _ in range(level):
        midpoint_cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (i, j) if i < j else (j, i)
            if key not in midpoint_cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                midpoint_cache[key] = len(verts) - 1
            return midpoint_cache[key]

        next_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            next_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = next_faces
    arr = np.asarray(verts)
    keys = np.round(arr * 1e9).astype(np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    return arr[order]


def _look_at(direction: np.ndarray) -> Rotation:
    """Rotation of a camera placed along `direction`, looking at the origin.

    The image up axis follows the object +y axis projected into the view
    plane; views parallel to y fall back to +x.
    """
    forward = -direction / np.linalg.norm(direction)
    up = np.array([0.0, 1.0, 0.0])
    up = up - np.dot(up, forward) * forward
    if np.linalg.norm(up) < 1e-6:
        up = np.array([1.0, 0.0, 0.0])
        up = up - np.dot(up, forward) * forward
    up /= np.linalg.norm(up)
    down = -up
    right = np.cross(down, forward)
    return Rotation.from_matrix(np.stack([right, down, forward]))


def sample_viewpoints(cfg: SamplerConfig) -> list[Rotation]:
    """One look-at rotation per icosphere vertex at the configured level."""
    return [_look_at(v) for v in icosphere(cfg.subdivision_level)]


def _camera_center(view: Rotation, cfg: SamplerConfig, diameter: float) -> np.ndarray:
    # Camera position in the object frame at the canonical template distance.
    return -cfg.depth_alpha * diameter * view.as_matrix().T @ np.array([0.0, 0.0, 1.0])


def filter_visible(
    views: list[Rotation], cfg: SamplerConfig, diameter: float
) -> list[Rotation]:
    """Keep views whose camera center clears the visibility plane.

    A view survives when e_z . t(R) >= visibility_sigma * diameter, where
    t(R) is the camera center at the canonical template distance.  A None
    threshold passes everything through unchanged.
    """
    if cfg.visibility_sigma is None:
        return list(views)
    if diameter <= 0:
        raise ValueError("diameter must be positive")
    limit = cfg.visibility_sigma * diameter
    return [v for v in views if _camera_center(v, cfg, diameter)[2] >= limit]


def augment_in_plane(views: list[Rotation], cfg: SamplerConfig) -> list[Rotation]:
    """Right-multiply every view by the in-plane sweep about the object z axis.

    Output order is view-major with the sweep angle ascending from zero, so
    len(result) == len(views) * round(2*pi / in_plane_step) always holds.
    """
    steps = cfg.in_plane_count
    out = []
    for view in views:
        for k in range(steps):
            spin = Rotation.from_axis_angle([0.0, 0.0, k * cfg.in_plane_step])
            out.append(view.compose(spin))
    return out


def template_pose(view: Rotation, cfg: SamplerConfig, diameter: float) -> Pose:
    """Canonical template pose: the view rotation at depth alpha * diameter."""
    if diameter <= 0:
        raise ValueError("diameter must be positive")
    return Pose(view, np.array([0.0, 0.0, cfg.depth_alpha * diameter]))
