"""Rigid-body and pinhole-camera primitives.

Conventions used throughout the package:

* Rotations are stored as unit quaternions in (w, x, y, z) order with the
  sign canonicalized so that w >= 0; when w == 0 the first nonzero component
  of (x, y, z) is made positive.  Constructors always normalize, so two
  objects describing the same physical rotation compare equal component-wise.
* Poses map object coordinates into camera coordinates: p_cam = R @ p_obj + t.
* Cameras look down +z with +x right and +y down.  Pixel centers sit at
  integer coordinates, depths and translations are meters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Rotation",
    "Pose",
    "TangentUpdate",
    "CameraModel",
    "compose",
    "inverse",
    "exp_update",
]


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Rotation:
    """A 3D rotation held as a canonical unit quaternion (w, x, y, z)."""

    quat: np.ndarray

    def __post_init__(self) -> None:
        q = np.array(self.quat, dtype=np.float64).reshape(4)
        if not np.all(np.isfinite(q)):
            raise ValueError("quaternion components must be finite")
        norm = float(np.linalg.norm(q))
        if norm < 1e-12:
            raise ValueError("quaternion has (near-)zero norm")
        if abs(norm - 1.0) > 1e-12:
            # Skip rescaling for already-unit input so canonicalization is
            # bitwise idempotent.
            q = q / norm
        if q[0] < 0.0:
            q = -q
        elif q[0] == 0.0:
            for component in q[1:]:
                if component != 0.0:
                    if component < 0.0:
                        q = -q
                    break
        object.__setattr__(self, "quat", _readonly(q))

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_axis_angle(cls, rotvec: np.ndarray) -> "Rotation":
        """Exponential map: a rotation-vector (axis * angle, radians) to a quaternion."""
        r = np.asarray(rotvec, dtype=np.float64).reshape(3)
        angle = float(np.linalg.norm(r))
        if angle < 1e-12:
            return cls(np.concatenate(([1.0], 0.5 * r)))
        half = 0.5 * angle
        return cls(np.concatenate(([np.cos(half)], r * (np.sin(half) / angle))))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Rotation":
        """Convert a proper orthonormal 3x3 matrix to a quaternion."""
        m = np.asarray(m, dtype=np.float64).reshape(3, 3)
        t = np.trace(m)
        if t > 0.0:
            s = np.sqrt(t + 1.0) * 2.0
            q = np.array(
                [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
            )
        elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            q = np.array(
                [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
            )
        elif m[1, 1] >= m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            q = np.array(
                [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
            )
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            q = np.array(
                [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
            )
        return cls(q)

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Rotation":
        """Uniform random rotation (Shoemake subgroup algorithm)."""
        u1, u2, u3 = rng.random(3)
        a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
        return cls(
            np.array(
                [
                    a * np.sin(2.0 * np.pi * u2),
                    a * np.cos(2.0 * np.pi * u2),
                    b * np.sin(2.0 * np.pi * u3),
                    b * np.cos(2.0 * np.pi * u3),
                ]
            )
        )

    def as_matrix(self) -> np.ndarray:
        w, x, y, z = self.quat
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def as_rotvec(self) -> np.ndarray:
        """Logarithm map: rotation vector with norm in [0, pi]."""
        w = self.quat[0]
        v = self.quat[1:]
        nv = float(np.linalg.norm(v))
        if nv < 1e-12:
            return 2.0 * v.copy()
        return v * (2.0 * np.arctan2(nv, w) / nv)

    def compose(self, other: "Rotation") -> "Rotation":
        """Hamilton product: self applied after other."""
        w1, x1, y1, z1 = self.quat
        w2, x2, y2, z2 = other.quat
        return Rotation(
            np.array(
                [
                    w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                    w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                    w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                    w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
                ]
            )
        )

    def inverse(self) -> "Rotation":
        w, x, y, z = self.quat
        return Rotation(np.array([w, -x, -y, -z]))

    def rotate(self, points: np.ndarray) -> np.ndarray:
        """Rotate one point (3,) or a stack of points (..., 3)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.as_matrix().T

    def angle(self) -> float:
        """Rotation angle in [0, pi] radians."""
        return float(2.0 * np.arctan2(np.linalg.norm(self.quat[1:]), self.quat[0]))

    def angle_to(self, other: "Rotation") -> float:
        """Geodesic angle between two rotations, radians."""
        return self.inverse().compose(other).angle()


@dataclass(frozen=True)
class Pose:
    """Rigid transform p_cam = R @ p_obj + t."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self) -> None:
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation components must be finite")
        object.__setattr__(self, "translation", _readonly(t))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(Rotation.identity(), np.zeros(3))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.as_matrix()
        m[:3, 3] = self.translation
        return m

    def transform(self, points: np.ndarray) -> np.ndarray:
        return self.rotation.rotate(points) + self.translation


@dataclass(frozen=True)
class TangentUpdate:
    """A small pose increment: rotation vector (norm < pi) plus translation delta."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        r = np.array(self.rotation, dtype=np.float64).reshape(3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("update components must be finite")
        if float(np.linalg.norm(r)) >= np.pi:
            raise ValueError("rotation-vector norm must be < pi")
        object.__setattr__(self, "rotation", _readonly(r))
        object.__setattr__(self, "translation", _readonly(t))


def compose(a: Pose, b: Pose) -> Pose:
    """Compose two poses: the result applies b first, then a."""
    return Pose(a.rotation.compose(b.rotation), a.rotation.rotate(b.translation) + a.translation)


def inverse(p: Pose) -> Pose:
    rinv = p.rotation.inverse()
    return Pose(rinv, -rinv.rotate(p.translation))


def exp_update(update: TangentUpdate) -> Pose:
    """Lift a tangent-space increment to a Pose (rotation via exponential map)."""
    return Pose(Rotation.from_axis_angle(update.rotation), update.translation)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics in pixels, image size, and the scale that
    converts stored integer depth values to meters."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = field(default=1.0)

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if self.depth_scale <= 0:
            raise ValueError("depth_scale must be positive")

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project camera-frame points to continuous pixel coordinates.

        Args:
            points: (..., 3) array, meters, camera frame.

        Returns:
            (uv, valid): uv is (..., 2), continuous and not clamped to the
            image; valid is a boolean mask, False where z <= 0 (those uv
            entries are NaN rather than extrapolated).
        """
        pts = np.asarray(points, dtype=np.float64)
        z = pts[..., 2]
        valid = np.isfinite(z) & (z > 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pts[..., 0] / z + self.cx
            v = self.fy * pts[..., 1] / z + self.cy
        uv = np.stack([u, v], axis=-1)
        uv[~valid] = np.nan
        return uv, valid

    def backproject(self, u: np.ndarray, v: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Lift pixel coordinates and metric depth to camera-frame points.

        Depth must be strictly positive; any z <= 0 raises ValueError.
        """
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        if np.any(~np.isfinite(z)) or np.any(z <= 0.0):
            raise ValueError("backproject requires strictly positive finite depth")
        x = (u - self.cx) / self.fx * z
        y = (v - self.cy) / self.fy * z
        return np.stack(np.broadcast_arrays(x, y, z), axis=-1)

    def crop_resized(
        self, u0: int, v0: int, u1: int, v1: int, out_w: int, out_h: int
    ) -> "CameraModel":
        """Intrinsics of a crop [u0, u1) x [v0, v1) resampled to out_w x out_h.

        The mapping is defined on pixel edges so a point projecting to
        continuous (u, v) in the full image projects to
        ((u - u0 + 0.5) * ru - 0.5, ...) in the crop, i.e. normalized image
        coordinates are preserved exactly.
        """
        if not (u1 > u0 and v1 > v0):
            raise ValueError("empty crop box")
        ru = out_w / float(u1 - u0)
        rv = out_h / float(v1 - v0)
        return CameraModel(
            fx=self.fx * ru,
            fy=self.fy * rv,
            cx=(self.cx - u0 + 0.5) * ru - 0.5,
            cy=(self.cy - v0 + 0.5) * rv - 0.5,
            width=out_w,
            height=out_h,
            depth_scale=self.depth_scale,
        )
