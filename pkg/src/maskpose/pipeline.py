"""End-to-end orchestration: templates, proposals, refinement, reporting.

The estimator chains the stages for a set of observed objects: a template
set is built (and cached) per model by rendering the viewpoint-sampled
hypothesis rotations and summarizing each render into patch features; each
object's visible-mask-gated patch matches are lifted to 3D, scored for
rigidity, and the best rotations plus a median-back-projected translation
seed the batched render-and-compare refiner; the highest-confidence
hypothesis per object wins.

Objects fail independently: an empty mask, missing features, or a
correspondence-free template set marks that object in the report and
leaves the others untouched.  For a fixed configuration and seed the
emitted result files are identical byte for byte regardless of the worker
thread count.

Translation seeding detail: back-projecting the median visible depth puts
the seed on the object's front surface, not at its center.  Each template
records how far the object center sits behind its own median visible
surface at render time; that view-specific offset is added back along the
optical axis when a hypothesis is seeded.
"""

import time
from dataclasses import dataclass, field, replace
from hashlib import sha1

import numpy as np

from maskpose.geom import CameraModel, Pose, Rotation
from maskpose.matcher import (
    FeatureMap,
    assign_nn,
    downsample_mask,
    gather_correspondences,
    lift_query_patches,
    oracle_features_from_depth,
    oracle_features_from_map,
    template_patch_centers,
)
from maskpose.metrics import MetricConfig
from maskpose.refine import (
    PREDICTORS,
    HypothesisBatch,
    RefineConfig,
    RefineResult,
    refine_batch,
    select_best,
)
from maskpose.sampler import (
    ObjectModel,
    SamplerConfig,
    augment_in_plane,
    filter_visible,
    sample_viewpoints,
    template_pose,
)
from maskpose.scene import SyntheticScene
from maskpose.scorer import ScoreConfig, ScoredHypothesis, estimate_translation, rigidity_score, select_top_k
from maskpose.warp import render_stack


class ProposalError(ValueError):
    """This object cannot produce pose proposals (isolated per object)."""


@dataclass(frozen=True)
class ObservationFrame:
    """One object's observation: shared rasters plus its own masks.

    depth is in meters with zeros marking invalid pixels; all rasters share
    the camera's height and width.
    """

    rgb: np.ndarray
    depth: np.ndarray
    visible_mask: np.ndarray
    camera: CameraModel
    occlusion_mask: np.ndarray | None = None
    features: FeatureMap | None = None
    identifier: str = "object"

    def __post_init__(self) -> None:
        rgb = np.ascontiguousarray(self.rgb)
        if rgb.dtype != np.uint8:
            raise ValueError("rgb must be uint8")
        depth = np.ascontiguousarray(self.depth, dtype=np.float64)
        visible = np.ascontiguousarray(self.visible_mask, dtype=bool)
        shape = (self.camera.height, self.camera.width)
        if depth.shape != shape or visible.shape != shape or rgb.shape != shape + (3,):
            raise ValueError("rasters must all match the camera dimensions")
        occ = self.occlusion_mask
        if occ is not None:
            occ = np.ascontiguousarray(occ, dtype=bool)
            if occ.shape != shape:
                raise ValueError("occlusion mask must match the camera dimensions")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "visible_mask", visible)
        object.__setattr__(self, "occlusion_mask", occ)


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings for one estimation run.

    hypotheses is the number of refined candidates per object and always
    equals the proposal stage's top-k; iterations is the refinement pass
    count.  expected_objects, when set, pins how many (frame, model) pairs
    estimate must receive.
    """

    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    refine: RefineConfig = field(default_factory=lambda: RefineConfig(crop_size=128))
    metric: MetricConfig = field(default_factory=MetricConfig)
    hypotheses: int = 7
    iterations: int = 4
    patch_stride: int = 8
    sigma_fraction: float = 0.1
    template_size: int = 128
    template_focal: float = 1000.0
    feature_source: str = "oracle"
    predictor: str = "geometric"
    mode: str = "batched"
    expected_objects: int | None = None
    seed: int = 0
    threads: int = 1
    out_dir: str | None = None

    def __post_init__(self) -> None:
        if self.hypotheses < 1:
            raise ValueError("hypotheses must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.patch_stride < 1:
            raise ValueError("patch_stride must be >= 1")
        if self.sigma_fraction <= 0:
            raise ValueError("sigma_fraction must be positive")
        if self.template_size < 4 * self.patch_stride:
            raise ValueError("template_size must cover at least 4 patches")
        if self.template_focal <= 0:
            raise ValueError("template_focal must be positive")
        if self.feature_source not in ("oracle", "file"):
            raise ValueError("feature_source must be 'oracle' or 'file'")
        if self.predictor not in PREDICTORS:
            raise ValueError(f"unknown predictor {self.predictor!r}")
        if self.mode not in ("batched", "sequential"):
            raise ValueError("mode must be 'batched' or 'sequential'")
        if self.expected_objects is not None and self.expected_objects < 1:
            raise ValueError("expected_objects must be >= 1 when set")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def effective_refine(self) -> RefineConfig:
        """The refinement config with the run-level overrides applied."""
        return replace(
            self.refine,
            iterations=self.iterations,
            threads=self.threads,
            predictor=self.predictor,
        )

    def score_config(self, model: ObjectModel) -> ScoreConfig:
        """Rigidity scoring config for one model; top_k always equals
        the run's hypothesis count."""
        return ScoreConfig(
            sigma=self.sigma_fraction * model.diameter, top_k=self.hypotheses
        )


def template_camera(cfg: RunConfig) -> CameraModel:
    size = cfg.template_size
    return CameraModel(
        fx=cfg.template_focal, fy=cfg.template_focal,
        cx=(size - 1) / 2.0, cy=(size - 1) / 2.0,
        width=size, height=size,
    )


@dataclass(frozen=True)
class Template:
    """Patch-level summary of one rendered hypothesis rotation."""

    rotation: Rotation
    pose: Pose
    features: FeatureMap
    grid_mask: np.ndarray
    centers_xyz: np.ndarray
    centers_valid: np.ndarray
    depth_offset: float


@dataclass(frozen=True)
class TemplateSet:
    identifier: str
    diameter: float
    stride: int
    camera: CameraModel
    templates: tuple[Template, ...]

    def __len__(self) -> int:
        return len(self.templates)


def _lower_median(values: np.ndarray) -> float:
    v = np.sort(np.asarray(values).ravel())
    return float(v[(len(v) - 1) // 2])


def build_templates(model: ObjectModel, cfg: RunConfig) -> TemplateSet:
    """Render every hypothesis rotation once and keep only patch summaries."""
    views = filter_visible(sample_viewpoints(cfg.sampler), cfg.sampler, model.diameter)
    rotations = augment_in_plane(views, cfg.sampler)
    cam = template_camera(cfg)
    poses = [template_pose(rot, cfg.sampler, model.diameter) for rot in rotations]
    maps = render_stack(model, poses, cam, cfg.refine.warp)

    templates = []
    for rot, pose, rendered in zip(rotations, poses, maps):
        features = oracle_features_from_map(
            rendered, pose, cfg.patch_stride, model.diameter
        )
        centers_xyz, centers_valid = template_patch_centers(rendered, cfg.patch_stride)
        grid_mask = downsample_mask(rendered.valid, cfg.patch_stride, features.grid)
        depths = rendered.xyz[..., 2][rendered.valid]
        offset = (
            float(pose.translation[2]) - _lower_median(depths) if depths.size else 0.0
        )
        templates.append(
            Template(
                rotation=rot,
                pose=pose,
                features=features,
                grid_mask=grid_mask,
                centers_xyz=centers_xyz,
                centers_valid=centers_valid,
                depth_offset=offset,
            )
        )
    return TemplateSet(
        identifier=model.identifier,
        diameter=model.diameter,
        stride=cfg.patch_stride,
        camera=cam,
        templates=tuple(templates),
    )


_TEMPLATE_CACHE: dict[tuple, TemplateSet] = {}


def template_set_for(model: ObjectModel, cfg: RunConfig) -> TemplateSet:
    """Cached template build keyed by model geometry and the knobs that
    shape templates; models with identical points share one set."""
    key = (
        sha1(model.points.tobytes()).hexdigest(),
        sha1(model.colors.tobytes()).hexdigest(),
        cfg.sampler,
        cfg.patch_stride,
        cfg.template_size,
        cfg.template_focal,
        cfg.refine.warp,
    )
    cached = _TEMPLATE_CACHE.get(key)
    if cached is None:
        cached = build_templates(model, cfg)
        _TEMPLATE_CACHE[key] = cached
    return cached


def clear_template_cache() -> None:
    _TEMPLATE_CACHE.clear()


@dataclass(frozen=True)
class ProposalSet:
    """Coarse-stage output for one object."""

    identifier: str
    poses: tuple[Pose, ...]
    scores: tuple[float, ...]
    t_init: np.ndarray
    candidates: int
    scored: int
    selected: int


def propose(
    frame: ObservationFrame, model: ObjectModel, tset: TemplateSet, cfg: RunConfig
) -> ProposalSet:
    """Mask-gated matching against every template, rigidity-ranked.

    The returned poses pair the top-k template rotations with the shared
    translation seed (median back-projection plus the per-template center
    depth offset).
    """
    if frame.features is None:
        raise ProposalError("frame has no features")
    if not frame.visible_mask.any():
        raise ProposalError("empty visible mask")
    score_cfg = cfg.score_config(model)
    t_surface = estimate_translation(frame.visible_mask, frame.depth, frame.camera)

    query = frame.features
    if query.patch_stride != tset.stride:
        raise ProposalError(
            f"feature stride {query.patch_stride} != template stride {tset.stride}"
        )
    query_flat = query.flat()
    query_grid_mask = downsample_mask(
        frame.visible_mask, query.patch_stride, query.grid
    ).reshape(-1)
    query_points, query_valid = lift_query_patches(
        frame.depth, frame.camera, query.patch_stride, frame.visible_mask
    )

    scored: list[ScoredHypothesis] = []
    for idx, tpl in enumerate(tset.templates):
        similarity = query_flat @ tpl.features.flat().T
        gate = query_grid_mask[:, None] & tpl.grid_mask.reshape(-1)[None, :]
        similarity[~gate] = 0.0
        pairs = assign_nn(similarity)
        if len(pairs[0]) == 0:
            continue
        corr = gather_correspondences(
            pairs, query_points, query_valid, tpl.centers_xyz, tpl.centers_valid
        )
        if len(corr) == 0:
            continue
        scored.append(
            ScoredHypothesis(tpl.rotation, rigidity_score(corr, score_cfg.sigma), corr, idx)
        )
    if not scored:
        raise ProposalError("no correspondences against any template")

    top = select_top_k(scored, min(score_cfg.top_k, len(scored)))
    poses, scores = [], []
    for hyp in top:
        offset = tset.templates[hyp.index].depth_offset
        t_init = t_surface + np.array([0.0, 0.0, offset])
        poses.append(Pose(hyp.rotation, t_init))
        scores.append(hyp.score)
    return ProposalSet(
        identifier=frame.identifier,
        poses=tuple(poses),
        scores=tuple(scores),
        t_init=poses[0].translation.copy(),
        candidates=len(tset.templates),
        scored=len(scored),
        selected=len(top),
    )


@dataclass(frozen=True)
class ObjectReport:
    """Final outcome for one object."""

    index: int
    identifier: str
    pose: Pose | None
    score: float
    slot: int | None
    proposals: ProposalSet | None
    roi_history: tuple[tuple[int, int, int, int], ...]
    error: str | None


@dataclass(frozen=True)
class EstimateReport:
    objects: tuple[ObjectReport, ...]
    stage_seconds: dict[str, float]
    per_object_seconds: dict[str, dict[str, float]]
    seed: int


def estimate(
    frames: list[ObservationFrame],
    models: list[ObjectModel],
    cfg: RunConfig,
) -> EstimateReport:
    """Run the full two-stage pipeline for paired frames and models.

    Per-object failures (empty mask, missing features, no correspondences)
    are recorded in that object's report entry; remaining objects continue
    through batched refinement unaffected.
    """
    if len(frames) != len(models):
        raise ValueError("frames and models must pair up")
    if len(frames) == 0:
        raise ValueError("nothing to estimate")
    if cfg.expected_objects is not None and len(frames) != cfg.expected_objects:
        raise ValueError(
            f"expected {cfg.expected_objects} objects, got {len(frames)}"
        )
    cam = frames[0].camera
    if any(f.camera != cam for f in frames):
        raise ValueError("all frames must share one camera")

    t_start = time.perf_counter()
    stage = {"templates": 0.0, "propose": 0.0, "refine": 0.0}
    per_object: dict[str, dict[str, float]] = {}

    proposals: dict[int, ProposalSet] = {}
    errors: dict[int, str] = {}
    for n, (frame, model) in enumerate(zip(frames, models)):
        t0 = time.perf_counter()
        try:
            tset = template_set_for(model, cfg)
            t1 = time.perf_counter()
            stage["templates"] += t1 - t0
            proposals[n] = propose(frame, model, tset, cfg)
            stage["propose"] += time.perf_counter() - t1
            per_object[str(n)] = {"propose": time.perf_counter() - t1}
        except (ProposalError, ValueError) as err:
            errors[n] = str(err)

    survivors = sorted(proposals)
    refined: RefineResult | None = None
    best: dict[int, tuple[Pose, float, int]] = {}
    if survivors:
        batch = HypothesisBatch.from_object_poses(
            [proposals[n].poses for n in survivors],
            [proposals[n].scores for n in survivors],
        )
        t2 = time.perf_counter()
        refined = refine_batch(
            batch,
            [frames[n] for n in survivors],
            [models[n] for n in survivors],
            cam,
            cfg.effective_refine(),
            mode=cfg.mode,
        )
        stage["refine"] = time.perf_counter() - t2
        best = select_best(refined.batch)

    reports = []
    for n, frame in enumerate(frames):
        if n in errors:
            reports.append(
                ObjectReport(
                    index=n, identifier=frame.identifier, pose=None, score=0.0,
                    slot=None, proposals=None, roi_history=(), error=errors[n],
                )
            )
            continue
        compact = survivors.index(n)
        if compact in (refined.failures if refined else {}):
            reports.append(
                ObjectReport(
                    index=n, identifier=frame.identifier, pose=None, score=0.0,
                    slot=None, proposals=proposals[n], roi_history=(),
                    error=refined.failures[compact],
                )
            )
            continue
        pose, score, slot = best[compact]
        history = tuple(refined.roi_history.get(compact, []))
        reports.append(
            ObjectReport(
                index=n, identifier=frame.identifier, pose=pose, score=score,
                slot=slot, proposals=proposals[n], roi_history=history, error=None,
            )
        )

    stage["total"] = time.perf_counter() - t_start
    return EstimateReport(
        objects=tuple(reports),
        stage_seconds=stage,
        per_object_seconds=per_object,
        seed=cfg.seed,
    )


def frames_from_scene(
    scene: SyntheticScene, cfg: RunConfig, with_features: bool = True
) -> tuple[list[ObservationFrame], list[ObjectModel]]:
    """Build per-object observation frames from a synthetic scene.

    Features come from the ground-truth poses (the oracle source); the
    occlusion mask is the ground-truth occluded region (amodal minus
    visible).
    """
    frames = []
    for i, model in enumerate(scene.models):
        features = None
        if with_features:
            features = oracle_features_from_depth(
                scene.depth,
                scene.visible_masks[i],
                scene.camera,
                scene.poses[i],
                cfg.patch_stride,
                model.diameter,
            )
        occlusion = scene.amodal_masks[i] & ~scene.visible_masks[i]
        frames.append(
            ObservationFrame(
                rgb=scene.rgb,
                depth=scene.depth,
                visible_mask=scene.visible_masks[i],
                camera=scene.camera,
                occlusion_mask=occlusion,
                features=features,
                identifier=model.identifier,
            )
        )
    return frames, list(scene.models)


def perturbed_batch(
    poses: list[Pose], count: int, seed: int,
    max_angle: float = np.deg2rad(12.0), max_shift: float = 0.03,
) -> HypothesisBatch:
    """Seeded perturbations of ground-truth poses, for benchmarks and
    refinement-only studies."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, len(poses), count]))
    per_object = []
    for pose in poses:
        slots = []
        for _ in range(count):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = rng.uniform(0.25 * max_angle, max_angle)
            shift = rng.uniform(0.25 * max_shift, max_shift)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            slots.append(
                Pose(
                    Rotation.from_axis_angle(axis * angle).compose(pose.rotation),
                    pose.translation + shift * direction,
                )
            )
        per_object.append(slots)
    return HypothesisBatch.from_object_poses(per_object)


def bench_throughput(
    cfg: RunConfig,
    mode: str,
    frames: list[ObservationFrame] | None = None,
    models: list[ObjectModel] | None = None,
    gt_poses: list[Pose] | None = None,
) -> dict:
    """Time batched or sequential refinement on a fixed hypothesis set.

    Both modes run identical math on identical inputs; the report carries
    the wall time, per-iteration warp and predictor time, throughput, and
    the final poses so callers can check the schedules agree.
    """
    if mode not in ("batched", "sequential"):
        raise ValueError("mode must be 'batched' or 'sequential'")
    if frames is None or models is None or gt_poses is None:
        from maskpose.scene import SceneSpec, generate_scene

        scene = generate_scene(
            SceneSpec(objects=("cube", "sphere", "lprism", "cube", "sphere")),
            seed=cfg.seed,
        )
        frames, models = frames_from_scene(scene, cfg, with_features=False)
        gt_poses = list(scene.poses)
    batch = perturbed_batch(gt_poses, cfg.hypotheses, cfg.seed)
    cam = frames[0].camera

    stage_times: list[dict[str, float]] = []
    t0 = time.perf_counter()
    result = refine_batch(
        batch, frames, models, cam, cfg.effective_refine(),
        mode=mode, stage_times=stage_times,
    )
    wall = time.perf_counter() - t0

    steps = len(batch) * cfg.iterations
    poses = [
        {
            "object": int(result.batch.object_idx[k]),
            "slot": int(result.batch.slot_idx[k]),
            "quat": [float(v) for v in result.batch.quats[k]],
            "t": [float(v) for v in result.batch.trans[k]],
        }
        for k in range(len(result.batch))
    ]
    return {
        "mode": mode,
        "seed": cfg.seed,
        "threads": cfg.threads,
        "objects": len(models),
        "hypotheses": len(batch),
        "iterations": cfg.iterations,
        "wall_time_s": wall,
        "hypotheses_per_second": steps / wall if wall > 0 else 0.0,
        "per_iteration": stage_times,
        "poses": poses,
    }


def results_rows(
    report: EstimateReport, scene_id: int = 0, im_id: int = 0
) -> list[dict]:
    """CSV-ready rows for every object that produced a pose.

    The time column is -1 by convention; wall-clock numbers live in the
    timings JSON, which keeps result files byte-stable across thread
    counts.
    """
    rows = []
    for obj in report.objects:
        if obj.pose is None:
            continue
        rows.append(
            {
                "scene_id": scene_id,
                "im_id": im_id,
                "obj_id": obj.index,
                "score": obj.score,
                "pose": obj.pose,
                "time": -1.0,
            }
        )
    return rows
