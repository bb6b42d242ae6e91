"""Viewpoint sampling, visibility filtering, in-plane augmentation."""

import numpy as np
import pytest

from maskpose.geom import Rotation
from maskpose.sampler import (
    ObjectModel,
    SamplerConfig,
    augment_in_plane,
    compute_diameter,
    filter_visible,
    icosphere,
    sample_viewpoints,
    template_pose,
)


def brute_force_diameter(points):
    pts = np.asarray(points)
    best = 0.0
    for i in range(len(pts)):
        d = np.linalg.norm(pts[i + 1 :] - pts[i], axis=1)
        if len(d):
            best = max(best, d.max())
    return best


class TestIcosphere:
    @pytest.mark.parametrize("level,expected", [(0, 12), (1, 42), (2, 162)])
    def test_vertex_count(self, level, expected):
        verts = icosphere(level)
        assert len(verts) == expected
        np.testing.assert_allclose(np.linalg.norm(verts, axis=1), 1.0, atol=1e-12)

    def test_deterministic_lexicographic_order(self):
        verts = icosphere(1)
        keys = np.round(verts * 1e9).astype(np.int64)
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        np.testing.assert_array_equal(order, np.arange(len(verts)))
        np.testing.assert_array_equal(icosphere(1), verts)

    def test_vertices_distinct(self):
        verts = icosphere(1)
        d = np.linalg.norm(verts[:, None, :] - verts[None, :, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        assert d.min() > 1e-3


class TestViewpoints:
    def test_rotations_are_proper_and_aim_at_origin(self):
        cfg = SamplerConfig(subdivision_level=1)
        views = sample_viewpoints(cfg)
        verts = icosphere(1)
        assert len(views) == 42
        for view, vertex in zip(views, verts):
            m = view.as_matrix()
            np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-12)
            assert abs(np.linalg.det(m) - 1.0) < 1e-12
            # Camera center direction must reproduce the sphere vertex.
            center = -m.T @ np.array([0.0, 0.0, 1.0])
            np.testing.assert_allclose(center, vertex, atol=1e-9)

    def test_pole_views_use_fallback_up(self):
        # Level 1 contains exact +-y vertices; the look-at must stay finite.
        cfg = SamplerConfig(subdivision_level=1)
        for view in sample_viewpoints(cfg):
            assert np.all(np.isfinite(view.quat))


class TestVisibilityFilter:
    def test_none_threshold_passes_through(self):
        cfg = SamplerConfig(subdivision_level=0, visibility_sigma=None)
        views = sample_viewpoints(cfg)
        assert filter_visible(views, cfg, 0.1) == views

    def test_zero_threshold_matches_sign_rule(self):
        cfg = SamplerConfig(subdivision_level=0, visibility_sigma=0.0)
        views = sample_viewpoints(cfg)
        diameter = 0.1
        kept = filter_visible(views, cfg, diameter)
        expected = [
            v
            for v in views
            if (-cfg.depth_alpha * diameter * v.as_matrix().T @ [0, 0, 1.0])[2] >= 0.0
        ]
        assert [k.quat.tobytes() for k in kept] == [e.quat.tobytes() for e in expected]

    def test_threshold_scales_with_alpha(self):
        # Keeping e_z . t(R) >= sigma * D means v_z >= sigma / alpha; pick a
        # threshold away from any vertex ring so float round-off cannot flip
        # membership.
        cfg = SamplerConfig(subdivision_level=1, visibility_sigma=4.5, depth_alpha=10.0)
        views = sample_viewpoints(cfg)
        kept = filter_visible(views, cfg, 0.2)
        verts = icosphere(1)
        expected = int(np.sum(verts[:, 2] >= 0.45))
        assert len(kept) == expected
        assert 0 < len(kept) < len(views)

    def test_impossible_threshold_empties(self):
        cfg = SamplerConfig(subdivision_level=0, visibility_sigma=100.0)
        assert filter_visible(sample_viewpoints(cfg), cfg, 0.1) == []


class TestInPlaneAugmentation:
    def test_counts(self):
        cfg = SamplerConfig(subdivision_level=0, in_plane_step=np.pi / 2)
        views = sample_viewpoints(cfg)
        hyps = augment_in_plane(views, cfg)
        assert len(hyps) == 48
        cfg_full = SamplerConfig(subdivision_level=1, in_plane_step=np.pi / 3)
        hyps_full = augment_in_plane(sample_viewpoints(cfg_full), cfg_full)
        assert len(hyps_full) == 252

    def test_all_distinct(self):
        cfg = SamplerConfig(subdivision_level=0, in_plane_step=np.pi / 2)
        hyps = augment_in_plane(sample_viewpoints(cfg), cfg)
        for i in range(len(hyps)):
            for j in range(i + 1, len(hyps)):
                assert hyps[i].angle_to(hyps[j]) > 1e-6

    def test_view_major_ascending_order(self):
        cfg = SamplerConfig(subdivision_level=0, in_plane_step=np.pi / 2)
        views = sample_viewpoints(cfg)
        hyps = augment_in_plane(views, cfg)
        for i, view in enumerate(views):
            for k in range(4):
                spin = Rotation.from_axis_angle([0, 0, k * np.pi / 2])
                expected = view.compose(spin)
                assert hyps[i * 4 + k].angle_to(expected) < 1e-12

    def test_step_must_divide_full_turn(self):
        with pytest.raises(ValueError):
            SamplerConfig(in_plane_step=np.radians(70.0))


class TestTemplatePose:
    def test_canonical_depth(self):
        cfg = SamplerConfig(depth_alpha=10.0)
        view = Rotation.random(np.random.default_rng(5))
        pose = template_pose(view, cfg, diameter=0.1)
        np.testing.assert_allclose(pose.translation, [0.0, 0.0, 1.0])
        assert pose.rotation.angle_to(view) == 0.0

    def test_rejects_bad_diameter(self):
        with pytest.raises(ValueError):
            template_pose(Rotation.identity(), SamplerConfig(), 0.0)


class TestObjectModel:
    def test_diameter_computed_matches_brute_force(self):
        rng = np.random.default_rng(13)
        pts = rng.normal(size=(300, 3))
        model = ObjectModel(points=pts)
        assert abs(model.diameter - brute_force_diameter(pts)) < 1e-9

    def test_stated_diameter_validated(self):
        rng = np.random.default_rng(17)
        pts = rng.normal(size=(50, 3))
        good = brute_force_diameter(pts)
        ObjectModel(points=pts, diameter=good)
        with pytest.raises(ValueError):
            ObjectModel(points=pts, diameter=good + 0.1)

    def test_rejects_coplanar(self):
        pts = np.zeros((10, 3))
        pts[:, 0] = np.arange(10)
        pts[:, 1] = np.arange(10) ** 2
        with pytest.raises(ValueError):
            ObjectModel(points=pts)

    def test_degenerate_allowed_without_validation(self):
        model = ObjectModel(
            points=np.array([[-0.05, 0, 0], [0.05, 0, 0]]), diameter=0.1, validate=False
        )
        assert model.diameter == 0.1

    def test_color_range_checked(self):
        pts = np.random.default_rng(0).normal(size=(8, 3))
        with pytest.raises(ValueError):
            ObjectModel(points=pts, colors=np.full((8, 3), 1.5))


def test_compute_diameter_random_oracle():
    rng = np.random.default_rng(99)
    for n in (2, 5, 40, 500):
        pts = rng.uniform(-1, 1, size=(n, 3))
        assert abs(compute_diameter(pts) - brute_force_diameter(pts)) < 1e-9
