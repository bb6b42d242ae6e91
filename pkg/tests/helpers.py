"""Shared fixtures-by-hand for the test suite: procedural models and frames."""

from dataclasses import dataclass

import numpy as np

from maskpose.geom import CameraModel, Pose
from maskpose.sampler import ObjectModel
from maskpose.warp import RgbXyzMap, WarpConfig, render_pointcloud

SCENE_CAM = CameraModel(fx=320.0, fy=320.0, cx=159.5, cy=119.5, width=320, height=240)


def cube_model(side: float = 0.15, grid: int = 48, identifier: str = "cube") -> ObjectModel:
    """Surface point cloud of an axis-centered cube, position-coded colors."""
    lin = np.linspace(-side / 2.0, side / 2.0, grid)
    a, b = np.meshgrid(lin, lin, indexing="ij")
    flat_a, flat_b = a.ravel(), b.ravel()
    half = np.full_like(flat_a, side / 2.0)
    faces = [
        np.stack([flat_a, flat_b, half], 1), np.stack([flat_a, flat_b, -half], 1),
        np.stack([flat_a, half, flat_b], 1), np.stack([flat_a, -half, flat_b], 1),
        np.stack([half, flat_a, flat_b], 1), np.stack([-half, flat_a, flat_b], 1),
    ]
    points = np.unique(np.round(np.concatenate(faces), 9), axis=0)
    colors = (points / side + 0.5).astype(np.float32)
    return ObjectModel(points=points, colors=colors, identifier=identifier)


def sphere_model(radius: float = 0.09, count: int = 6000, identifier: str = "sphere") -> ObjectModel:
    """Fibonacci-spiral sphere surface cloud."""
    k = np.arange(count, dtype=np.float64)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    z = 1.0 - 2.0 * (k + 0.5) / count
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    theta = golden * k
    points = radius * np.stack([r * np.cos(theta), r * np.sin(theta), z], 1)
    colors = (points / (2 * radius) + 0.5).astype(np.float32)
    return ObjectModel(points=points, colors=colors, identifier=identifier)


@dataclass
class SimpleFrame:
    """Minimal observation record refine_batch can consume."""

    rgb: np.ndarray
    depth: np.ndarray
    visible_mask: np.ndarray
    occlusion_mask: np.ndarray | None = None


def solo_frame(
    model: ObjectModel,
    pose: Pose,
    cam: CameraModel = SCENE_CAM,
    warp: WarpConfig | None = None,
) -> SimpleFrame:
    """Render one object alone and package it as an observation."""
    rendered = render_pointcloud(model, pose, cam, warp or WarpConfig())
    depth = np.where(rendered.valid, rendered.xyz[..., 2].astype(np.float64), 0.0)
    rgb = (np.clip(rendered.rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    return SimpleFrame(rgb=rgb, depth=depth, visible_mask=rendered.valid.copy())


def pose_error(model: ObjectModel, estimated: Pose, truth: Pose) -> float:
    """Mean same-index point distance between the two placements."""
    a = estimated.transform(model.points)
    b = truth.transform(model.points)
    return float(np.linalg.norm(a - b, axis=1).mean())
