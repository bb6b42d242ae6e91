"""Mask-aware 6D object pose estimation.

Two-stage estimator: viewpoint-sampled, mask-gated feature matching proposes
rotation hypotheses, and a batched render-and-compare loop refines them with
amodal region-of-interest re-alignment.  Learned feature and increment
predictors are pluggable; the package ships deterministic geometric stand-ins
so every stage runs and is testable without trained weights.
"""

from maskpose.geom import CameraModel, Pose, Rotation, TangentUpdate, compose, exp_update, inverse
from maskpose.matcher import CorrespondenceSet, FeatureMap, assign_nn, masked_similarity
from maskpose.metrics import MetricConfig, add_error, adds_error
from maskpose.pipeline import (
    EstimateReport,
    ObjectReport,
    ObservationFrame,
    ProposalSet,
    RunConfig,
    bench_throughput,
    estimate,
    frames_from_scene,
    propose,
    template_set_for,
)
from maskpose.refine import HypothesisBatch, RefineConfig, refine_batch, select_best
from maskpose.sampler import ObjectModel, SamplerConfig
from maskpose.scene import SceneSpec, SyntheticScene, generate_scene
from maskpose.scorer import ScoreConfig, rigidity_score, select_top_k
from maskpose.warp import RgbXyzMap, WarpConfig, render_pointcloud, reproject

__version__ = "0.1.0"

__all__ = [
    "CameraModel",
    "CorrespondenceSet",
    "EstimateReport",
    "FeatureMap",
    "HypothesisBatch",
    "MetricConfig",
    "ObjectModel",
    "ObjectReport",
    "ObservationFrame",
    "Pose",
    "ProposalSet",
    "RefineConfig",
    "RgbXyzMap",
    "Rotation",
    "RunConfig",
    "SamplerConfig",
    "SceneSpec",
    "ScoreConfig",
    "SyntheticScene",
    "TangentUpdate",
    "WarpConfig",
    "add_error",
    "adds_error",
    "assign_nn",
    "bench_throughput",
    "compose",
    "estimate",
    "exp_update",
    "frames_from_scene",
    "generate_scene",
    "inverse",
    "masked_similarity",
    "propose",
    "refine_batch",
    "render_pointcloud",
    "reproject",
    "rigidity_score",
    "select_best",
    "select_top_k",
    "template_set_for",
    "__version__",
]
