"""Pose-error metric tests: hand-checkable geometries and brute-force oracles."""

import numpy as np
import pytest

from maskpose.geom import Pose, Rotation, compose
from maskpose.metrics import (
    DEFAULT_AR_THRESHOLDS,
    MetricConfig,
    add_accuracy,
    add_error,
    adds_error,
    average_recall,
    subsample_points,
    threshold_recall,
)
from maskpose.sampler import ObjectModel


def random_model(rng, count=40):
    return ObjectModel(rng.normal(scale=0.05, size=(count, 3)))


def random_pose(rng):
    return Pose(Rotation.random(rng), rng.normal(scale=0.3, size=3))


def antipodal_model():
    pts = np.array([[-0.1, 0.0, 0.0], [0.1, 0.0, 0.0]])
    return ObjectModel(pts, validate=False)


def square_model(half=0.05):
    pts = np.array(
        [[half, half, 0.0], [-half, half, 0.0], [-half, -half, 0.0], [half, -half, 0.0]]
    )
    return ObjectModel(pts, validate=False)


class TestAddError:
    def test_identical_poses_give_zero(self):
        rng = np.random.default_rng(20)
        model = random_model(rng)
        pose = random_pose(rng)
        assert add_error(model, pose, pose) == 0.0

    def test_pure_translation_offset(self):
        rng = np.random.default_rng(21)
        model = random_model(rng)
        gt = random_pose(rng)
        pred = Pose(gt.rotation, gt.translation + np.array([0.01, 0.0, 0.0]))
        assert np.isclose(add_error(model, pred, gt), 0.01, atol=1e-12)

    def test_antipodal_flip_equals_diameter(self):
        model = antipodal_model()
        gt = Pose(Rotation.identity(), np.zeros(3))
        pred = Pose(Rotation.from_axis_angle([0.0, 0.0, np.pi]), np.zeros(3))
        assert np.isclose(add_error(model, pred, gt), model.diameter, atol=1e-12)
        assert np.isclose(model.diameter, 0.2, atol=1e-12)

    def test_invariant_under_common_left_composition(self):
        rng = np.random.default_rng(22)
        model = random_model(rng)
        for _ in range(20):
            pred, gt, common = (random_pose(rng) for _ in range(3))
            moved = add_error(model, compose(common, pred), compose(common, gt))
            assert np.isclose(moved, add_error(model, pred, gt), atol=1e-9)


class TestAddsError:
    def test_square_quarter_turn_is_symmetric(self):
        model = square_model()
        gt = Pose(Rotation.identity(), np.zeros(3))
        pred = Pose(Rotation.from_axis_angle([0.0, 0.0, np.pi / 2]), np.zeros(3))
        assert adds_error(model, pred, gt) < 1e-12
        assert np.isclose(add_error(model, pred, gt), 0.1, atol=1e-12)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(23)
        for _ in range(50):
            model = random_model(rng, count=30)
            pred, gt = random_pose(rng), random_pose(rng)
            predicted = pred.transform(model.points)
            truth = gt.transform(model.points)
            pairwise = np.linalg.norm(
                predicted[:, None, :] - truth[None, :, :], axis=2
            )
            expected = float(np.mean(pairwise.min(axis=1)))
            assert np.isclose(adds_error(model, pred, gt), expected, atol=1e-12)

    def test_never_exceeds_add(self):
        rng = np.random.default_rng(24)
        for _ in range(1000):
            model = random_model(rng, count=12)
            pred, gt = random_pose(rng), random_pose(rng)
            assert adds_error(model, pred, gt) <= add_error(model, pred, gt) + 1e-12


class TestAddAccuracy:
    def test_all_exact_poses_give_hundred(self):
        rng = np.random.default_rng(25)
        model = random_model(rng)
        assert add_accuracy(np.zeros(10), model) == 100.0

    def test_half_within_threshold(self):
        rng = np.random.default_rng(26)
        model = random_model(rng)
        errors = np.array([0.05 * model.diameter, 0.15 * model.diameter])
        assert add_accuracy(errors, model) == 50.0

    def test_threshold_is_strict(self):
        rng = np.random.default_rng(27)
        model = random_model(rng)
        boundary = np.array([0.1 * model.diameter])
        assert add_accuracy(boundary, model) == 0.0

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(28)
        model = random_model(rng)
        errors = rng.uniform(0.0, 0.3 * model.diameter, size=1000)
        limit = 0.1 * model.diameter
        expected = 100.0 * sum(1 for e in errors if e < limit) / len(errors)
        assert np.isclose(add_accuracy(errors, model), expected, atol=1e-9)

    def test_empty_errors_give_zero(self):
        rng = np.random.default_rng(29)
        assert add_accuracy(np.array([]), random_model(rng)) == 0.0

    def test_monotone_in_error_magnitude(self):
        rng = np.random.default_rng(30)
        model = random_model(rng)
        errors = rng.uniform(0.0, 0.2 * model.diameter, size=200)
        baseline = add_accuracy(errors, model)
        assert add_accuracy(errors * 1.5, model) <= baseline
        assert add_accuracy(errors * 0.5, model) >= baseline


class TestThresholdRecall:
    def test_defaults_step_five_percent(self):
        assert DEFAULT_AR_THRESHOLDS == tuple(
            round(0.05 * k, 2) for k in range(1, 11)
        )

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(31)
        model = random_model(rng)
        errors = rng.uniform(0.0, 0.6 * model.diameter, size=333)
        total = 0.0
        for fraction in DEFAULT_AR_THRESHOLDS:
            hits = sum(1 for e in errors if e < fraction * model.diameter)
            total += hits / len(errors)
        expected = total / len(DEFAULT_AR_THRESHOLDS)
        assert np.isclose(threshold_recall(errors, model), expected, atol=1e-12)

    def test_zero_errors_give_full_recall(self):
        rng = np.random.default_rng(32)
        assert threshold_recall(np.zeros(7), random_model(rng)) == 1.0

    def test_empty_errors_give_zero(self):
        rng = np.random.default_rng(33)
        assert threshold_recall(np.array([]), random_model(rng)) == 0.0


class TestAverageRecall:
    def test_perfect_recalls(self):
        assert average_recall((1.0, 1.0, 1.0)) == 1.0

    def test_documented_example(self):
        assert np.isclose(average_recall((0.6, 0.7, 0.8)), 0.7, atol=1e-12)

    def test_is_arithmetic_mean(self):
        rng = np.random.default_rng(34)
        for _ in range(100):
            triple = tuple(rng.uniform(0.0, 1.0, size=3))
            assert np.isclose(average_recall(triple), sum(triple) / 3, atol=1e-12)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            average_recall((0.5, 1.5, 0.5))
        with pytest.raises(ValueError):
            average_recall((-0.1, 0.5, 0.5))

    def test_rejects_wrong_length(self):
        with pytest.raises(ValueError):
            average_recall((0.5, 0.5))


class TestSubsampleAndConfig:
    def test_small_clouds_pass_through(self):
        rng = np.random.default_rng(35)
        pts = rng.normal(size=(500, 3))
        assert np.array_equal(subsample_points(pts), pts)

    def test_large_clouds_capped_deterministically(self):
        rng = np.random.default_rng(36)
        pts = rng.normal(size=(25_000, 3))
        first = subsample_points(pts)
        second = subsample_points(pts)
        assert len(first) <= 10_000
        assert np.array_equal(first, second)
        assert np.array_equal(first[0], pts[0])

    def test_metrics_agree_with_manual_stride(self):
        rng = np.random.default_rng(37)
        pts = rng.normal(scale=0.05, size=(25_000, 3))
        model = ObjectModel(pts)
        pred, gt = random_pose(rng), random_pose(rng)
        kept = subsample_points(pts)
        expected = float(
            np.mean(np.linalg.norm(pred.transform(kept) - gt.transform(kept), axis=1))
        )
        assert np.isclose(add_error(model, pred, gt), expected, atol=1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MetricConfig(add_threshold_fraction=0.0)
        with pytest.raises(ValueError):
            MetricConfig(add_threshold_fraction=1.0)
        with pytest.raises(ValueError):
            MetricConfig(ar_thresholds=())
        with pytest.raises(ValueError):
            MetricConfig(ar_thresholds=(0.1, 0.1))
        with pytest.raises(ValueError):
            MetricConfig(ar_thresholds=(-0.05, 0.1))
