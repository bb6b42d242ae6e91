"""End-to-end orchestration: templates, proposals, estimation, benchmarks."""

import dataclasses

import numpy as np
import pytest

from maskpose.geom import CameraModel, Pose, Rotation
from maskpose.io import validate_json
from maskpose.matcher import (
    assign_nn,
    downsample_mask,
    gather_correspondences,
    lift_from_centers,
    lift_query_patches,
    masked_similarity,
)
from maskpose.metrics import add_error
from maskpose.pipeline import (
    ObservationFrame,
    ProposalError,
    RunConfig,
    bench_throughput,
    build_templates,
    clear_template_cache,
    estimate,
    frames_from_scene,
    perturbed_batch,
    propose,
    results_rows,
    template_camera,
    template_set_for,
)
from maskpose.refine import RefineConfig
from maskpose.scene import SceneSpec, generate_scene
from maskpose.warp import render_stack


@pytest.fixture(scope="module")
def cfg():
    return RunConfig()


@pytest.fixture(scope="module")
def cube_scene():
    return generate_scene(SceneSpec(objects=("cube",)), seed=11)


@pytest.fixture(scope="module")
def cube_setup(cfg, cube_scene):
    frames, models = frames_from_scene(cube_scene, cfg)
    tset = template_set_for(models[0], cfg)
    return frames, models, tset


class TestRunConfig:
    def test_defaults_valid(self, cfg):
        assert cfg.hypotheses == 7
        assert cfg.iterations == 4
        assert cfg.mode == "batched"

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"hypotheses": 0},
            {"iterations": 0},
            {"patch_stride": 0},
            {"sigma_fraction": 0.0},
            {"template_size": 16, "patch_stride": 8},
            {"template_focal": 0.0},
            {"feature_source": "net"},
            {"predictor": "learned"},
            {"mode": "turbo"},
            {"expected_objects": 0},
            {"threads": 0},
        ],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            RunConfig(**kwargs)

    def test_score_config_ties_top_k_to_hypotheses(self, cfg, cube_setup):
        _, models, _ = cube_setup
        sc = cfg.score_config(models[0])
        assert sc.top_k == cfg.hypotheses
        assert sc.sigma == pytest.approx(cfg.sigma_fraction * models[0].diameter)
        custom = dataclasses.replace(cfg, hypotheses=3)
        assert custom.score_config(models[0]).top_k == 3

    def test_effective_refine_applies_run_overrides(self):
        run = RunConfig(iterations=2, threads=5, predictor="zero")
        eff = run.effective_refine()
        assert eff.iterations == 2
        assert eff.threads == 5
        assert eff.predictor == "zero"


class TestObservationFrame:
    def make(self, **over):
        cam = CameraModel(fx=100.0, fy=100.0, cx=31.5, cy=31.5, width=64, height=64)
        fields = {
            "rgb": np.zeros((64, 64, 3), np.uint8),
            "depth": np.zeros((64, 64)),
            "visible_mask": np.zeros((64, 64), bool),
            "camera": cam,
        }
        fields.update(over)
        return ObservationFrame(**fields)

    def test_accepts_matching_rasters(self):
        frame = self.make()
        assert frame.occlusion_mask is None
        assert frame.features is None

    def test_rejects_non_uint8_rgb(self):
        with pytest.raises(ValueError, match="uint8"):
            self.make(rgb=np.zeros((64, 64, 3)))

    def test_rejects_shape_mismatches(self):
        with pytest.raises(ValueError, match="camera dimensions"):
            self.make(depth=np.zeros((32, 64)))
        with pytest.raises(ValueError, match="camera dimensions"):
            self.make(visible_mask=np.zeros((64, 32), bool))
        with pytest.raises(ValueError, match="occlusion"):
            self.make(occlusion_mask=np.zeros((32, 32), bool))


class TestTemplates:
    def test_default_sampler_produces_252(self, cube_setup):
        _, _, tset = cube_setup
        assert len(tset) == 252

    def test_cache_returns_same_instance(self, cfg, cube_setup):
        _, models, tset = cube_setup
        assert template_set_for(models[0], cfg) is tset

    def test_cache_clear_rebuilds(self, cfg, cube_scene):
        frames, models = frames_from_scene(cube_scene, cfg, with_features=False)
        first = template_set_for(models[0], cfg)
        clear_template_cache()
        second = template_set_for(models[0], cfg)
        assert second is not first
        assert len(second) == len(first)

    def test_template_camera_centers_object(self, cfg):
        cam = template_camera(cfg)
        assert cam.width == cam.height == cfg.template_size
        assert cam.cx == pytest.approx((cfg.template_size - 1) / 2)

    def test_depth_offset_within_object_extent(self, cube_setup):
        _, models, tset = cube_setup
        offsets = np.array([t.depth_offset for t in tset.templates])
        assert np.all(offsets > 0.0)
        assert np.all(offsets < models[0].diameter)

    def test_oracle_features_have_diameter_norm(self, cube_setup):
        _, models, tset = cube_setup
        tpl = tset.templates[0]
        feats = tpl.features.flat()[tpl.centers_valid]
        np.testing.assert_allclose(
            np.linalg.norm(feats, axis=1), models[0].diameter, atol=1e-9
        )


class TestGatedMatchingEquivalence:
    """The fast propose path must equal the reference mask-gated pipeline."""

    def test_matches_masked_similarity_and_lift(self, cfg, cube_setup):
        frames, models, tset = cube_setup
        frame = frames[0]
        query = frame.features
        query_flat = query.flat()
        query_grid = downsample_mask(
            frame.visible_mask, query.patch_stride, query.grid
        ).reshape(-1)
        query_points, query_valid = lift_query_patches(
            frame.depth, frame.camera, query.patch_stride, frame.visible_mask
        )
        for idx in (0, 17, 101, 250):
            tpl = tset.templates[idx]
            rendered = render_stack(
                models[0], [tpl.pose], tset.camera, cfg.refine.warp
            )[0]
            np.testing.assert_array_equal(
                tpl.grid_mask,
                downsample_mask(rendered.valid, cfg.patch_stride, tpl.features.grid),
            )
            reference = masked_similarity(
                query, frame.visible_mask, tpl.features, rendered.valid
            )
            fast = query_flat @ tpl.features.flat().T
            gate = query_grid[:, None] & tpl.grid_mask.reshape(-1)[None, :]
            fast[~gate] = 0.0
            np.testing.assert_array_equal(fast, reference)

            pairs = assign_nn(reference)
            slow = lift_from_centers(
                pairs, frame.depth, frame.camera, tpl.centers_xyz,
                tpl.centers_valid, query.patch_stride, frame.visible_mask,
            )
            quick = gather_correspondences(
                pairs, query_points, query_valid, tpl.centers_xyz, tpl.centers_valid
            )
            np.testing.assert_array_equal(quick.query_points, slow.query_points)
            np.testing.assert_array_equal(quick.template_points, slow.template_points)
            np.testing.assert_array_equal(quick.weights, slow.weights)
            np.testing.assert_array_equal(quick.query_patches, slow.query_patches)
            np.testing.assert_array_equal(quick.template_patches, slow.template_patches)


class TestPropose:
    def test_diagnostics_count_the_reduction(self, cfg, cube_setup):
        frames, models, tset = cube_setup
        props = propose(frames[0], models[0], tset, cfg)
        assert props.candidates == 252
        assert props.scored <= 252
        assert props.selected == 7
        assert len(props.poses) == 7
        assert list(props.scores) == sorted(props.scores, reverse=True)

    def test_translation_seed_near_ground_truth(self, cfg, cube_setup, cube_scene):
        frames, models, tset = cube_setup
        props = propose(frames[0], models[0], tset, cfg)
        gt = cube_scene.poses[0]
        assert np.linalg.norm(props.t_init - gt.translation) < 0.04

    def test_best_rotation_within_codebook_resolution(self, cfg, cube_setup, cube_scene):
        frames, models, tset = cube_setup
        props = propose(frames[0], models[0], tset, cfg)
        gt = cube_scene.poses[0]
        best = min(p.rotation.angle_to(gt.rotation) for p in props.poses)
        assert np.rad2deg(best) < 40.0

    def test_missing_features_rejected(self, cfg, cube_setup, cube_scene):
        frames, models, tset = cube_setup
        bare = ObservationFrame(
            rgb=cube_scene.rgb, depth=cube_scene.depth,
            visible_mask=cube_scene.visible_masks[0], camera=cube_scene.camera,
        )
        with pytest.raises(ProposalError, match="features"):
            propose(bare, models[0], tset, cfg)

    def test_empty_mask_rejected(self, cfg, cube_setup, cube_scene):
        frames, models, tset = cube_setup
        empty = ObservationFrame(
            rgb=cube_scene.rgb, depth=cube_scene.depth,
            visible_mask=np.zeros_like(cube_scene.visible_masks[0]),
            camera=cube_scene.camera, features=frames[0].features,
        )
        with pytest.raises(ProposalError, match="empty visible mask"):
            propose(empty, models[0], tset, cfg)

    def test_stride_mismatch_rejected(self, cfg, cube_setup):
        frames, models, tset = cube_setup
        from maskpose.matcher import FeatureMap

        coarse = FeatureMap(frames[0].features.data[::2, ::2], 16)
        frame = dataclasses.replace(frames[0], features=coarse)
        with pytest.raises(ProposalError, match="stride"):
            propose(frame, models[0], tset, cfg)


class TestEstimate:
    def test_single_cube_converges(self, cfg, cube_setup, cube_scene):
        frames, models, _ = cube_setup
        report = estimate(frames, models, cfg)
        obj = report.objects[0]
        assert obj.error is None
        err = add_error(models[0], obj.pose, cube_scene.poses[0])
        assert err < 0.05 * models[0].diameter
        assert len(obj.roi_history) == cfg.iterations + 1
        assert report.seed == cfg.seed
        for key in ("templates", "propose", "refine", "total"):
            assert key in report.stage_seconds

    def test_failures_are_isolated(self, cfg, cube_scene):
        frames, models = frames_from_scene(cube_scene, cfg)
        broken = ObservationFrame(
            rgb=frames[0].rgb, depth=frames[0].depth,
            visible_mask=np.zeros_like(frames[0].visible_mask),
            camera=frames[0].camera, features=frames[0].features,
            identifier="broken",
        )
        report = estimate([frames[0], broken], [models[0], models[0]], cfg)
        good, bad = report.objects
        assert bad.error is not None and "empty visible mask" in bad.error
        assert bad.pose is None
        assert good.error is None
        assert add_error(models[0], good.pose, cube_scene.poses[0]) < 0.05 * models[0].diameter

    def test_precondition_errors(self, cfg, cube_setup):
        frames, models, _ = cube_setup
        with pytest.raises(ValueError, match="pair up"):
            estimate(frames, models + models, cfg)
        with pytest.raises(ValueError, match="nothing"):
            estimate([], [], cfg)
        pinned = dataclasses.replace(cfg, expected_objects=3)
        with pytest.raises(ValueError, match="expected 3"):
            estimate(frames, models, pinned)

    def test_camera_mismatch_rejected(self, cfg, cube_setup):
        frames, models, _ = cube_setup
        other_cam = CameraModel(
            fx=200.0, fy=200.0, cx=159.5, cy=119.5, width=320, height=240,
            depth_scale=0.001,
        )
        moved = ObservationFrame(
            rgb=frames[0].rgb, depth=frames[0].depth,
            visible_mask=frames[0].visible_mask, camera=other_cam,
            features=frames[0].features,
        )
        with pytest.raises(ValueError, match="share one camera"):
            estimate([frames[0], moved], models + models, cfg)

    def test_deterministic_across_runs_and_threads(self, cfg, cube_setup):
        frames, models, _ = cube_setup
        reports = [
            estimate(frames, models, dataclasses.replace(cfg, threads=threads))
            for threads in (1, 1, 2)
        ]
        base = reports[0].objects[0]
        for other in reports[1:]:
            obj = other.objects[0]
            assert obj.pose.rotation.quat.tobytes() == base.pose.rotation.quat.tobytes()
            assert obj.pose.translation.tobytes() == base.pose.translation.tobytes()
            assert obj.score == base.score


class TestFramesFromScene:
    def test_masks_and_features(self, cfg):
        scene = generate_scene(
            SceneSpec(objects=("cube", "sphere"), occluded_object=0), seed=5
        )
        frames, models = frames_from_scene(scene, cfg)
        assert [f.identifier for f in frames] == [m.identifier for m in models]
        for i, frame in enumerate(frames):
            np.testing.assert_array_equal(
                frame.occlusion_mask,
                scene.amodal_masks[i] & ~scene.visible_masks[i],
            )
            assert frame.features is not None
        bare, _ = frames_from_scene(scene, cfg, with_features=False)
        assert all(f.features is None for f in bare)


class TestBench:
    def test_batched_equals_sequential(self, cfg):
        scene = generate_scene(SceneSpec(objects=("cube", "lprism")), seed=2)
        frames, models = frames_from_scene(scene, cfg, with_features=False)
        reports = {
            mode: bench_throughput(
                cfg, mode, frames=frames, models=models, gt_poses=list(scene.poses)
            )
            for mode in ("batched", "sequential")
        }
        for payload in reports.values():
            validate_json(payload, "report")
            assert len(payload["per_iteration"]) == cfg.iterations
            assert payload["hypotheses"] == 2 * cfg.hypotheses
            assert payload["hypotheses_per_second"] > 0
        for pa, pb in zip(reports["batched"]["poses"], reports["sequential"]["poses"]):
            assert pa == pb

    def test_bad_mode_rejected(self, cfg):
        with pytest.raises(ValueError, match="mode"):
            bench_throughput(cfg, "warp-speed")

    def test_perturbed_batch_is_seeded_and_bounded(self):
        rng = np.random.default_rng(4)
        poses = [Pose(Rotation.random(rng), np.array([0.0, 0.0, 1.0]))]
        a = perturbed_batch(poses, 7, seed=9)
        b = perturbed_batch(poses, 7, seed=9)
        np.testing.assert_array_equal(a.quats, b.quats)
        np.testing.assert_array_equal(a.trans, b.trans)
        c = perturbed_batch(poses, 7, seed=10)
        assert not np.array_equal(a.quats, c.quats)
        for k in range(len(a)):
            gap = a.pose(k).rotation.angle_to(poses[0].rotation)
            shift = np.linalg.norm(a.pose(k).translation - poses[0].translation)
            assert np.deg2rad(2.9) <= gap <= np.deg2rad(12.1)
            assert 0.007 <= shift <= 0.0301


class TestResultsRows:
    def test_skips_failures_and_flags_time(self, cfg, cube_setup):
        frames, models, _ = cube_setup
        broken = ObservationFrame(
            rgb=frames[0].rgb, depth=frames[0].depth,
            visible_mask=np.zeros_like(frames[0].visible_mask),
            camera=frames[0].camera, features=frames[0].features,
        )
        report = estimate([frames[0], broken], [models[0], models[0]], cfg)
        rows = results_rows(report, scene_id=11, im_id=2)
        assert len(rows) == 1
        assert rows[0]["scene_id"] == 11
        assert rows[0]["im_id"] == 2
        assert rows[0]["obj_id"] == 0
        assert rows[0]["time"] == -1.0


class TestBuildTemplatesDirect:
    def test_matches_cached_summaries(self, cfg, cube_setup):
        _, models, tset = cube_setup
        rebuilt = build_templates(models[0], cfg)
        assert len(rebuilt) == len(tset)
        np.testing.assert_array_equal(
            rebuilt.templates[0].features.data, tset.templates[0].features.data
        )
        assert rebuilt.templates[0].depth_offset == tset.templates[0].depth_offset
