import dataclasses
import math

import numpy as np
import pytest

from lidarssl.augment import (
    AugmentationConfig,
    Transform,
    apply_transform,
    make_view_pair,
    sample_transform,
)
from lidarssl.pointcloud import PointCloud


def identity_config() -> AugmentationConfig:
    return AugmentationConfig(
        flip_prob=0.0,
        scale_range=(1.0, 1.0),
        rot_range_deg=(0.0, 0.0),
        rot_prob=0.0,
        drop_frac_max=0.0,
        coord_noise_sigma_range=(0.0, 0.0),
        intensity_noise_sigma_range=(0.0, 0.0),
        cuboid_min_area_frac=1.0,
        patch_drop_max_frac=0.0,
    )


def identity_transform() -> Transform:
    return dataclasses.replace(
        sample_transform(identity_config(), seed=0),
        flip_axis=None,
        scale=1.0,
        rot_angle_rad=0.0,
        drop_frac=0.0,
        coord_sigma=0.0,
        intensity_sigma=0.0,
        cuboid_frac_bounds=(0.0, 0.0, 1.0, 1.0),
        patch_drop_frac=0.0,
    )


def random_cloud(seed, n=1000) -> PointCloud:
    r = np.random.default_rng(seed)
    pts = np.column_stack([r.normal(size=(n, 3)) * 10, r.uniform(0, 1, size=n)])
    return PointCloud(points=pts)


class TestSampleTransform:
    def test_same_seed_same_transform(self):
        cfg = AugmentationConfig()
        assert sample_transform(cfg, 42) == sample_transform(cfg, 42)

    def test_different_seed_changes_a_draw(self):
        cfg = AugmentationConfig()
        base = sample_transform(cfg, 0)
        assert any(sample_transform(cfg, s) != base for s in range(1, 101))

    def test_flip_rate_monte_carlo(self):
        cfg = AugmentationConfig()
        flips = sum(sample_transform(cfg, s).flip_axis is not None for s in range(10_000))
        assert abs(flips / 10_000 - 0.5) < 0.02

    def test_zero_drop_config_never_drops(self):
        cfg = AugmentationConfig(drop_frac_max=0.0)
        for s in range(50):
            assert sample_transform(cfg, s).drop_frac == 0.0

    def test_draw_ranges(self):
        cfg = AugmentationConfig()
        for s in range(200):
            t = sample_transform(cfg, s)
            assert 0.95 <= t.scale <= 1.05
            assert abs(t.rot_angle_rad) <= math.radians(45.0)
            assert 0.0 <= t.drop_frac <= 0.20
            assert 0.0 <= t.coord_sigma <= 0.015
            assert 0.0 <= t.intensity_sigma <= 0.01
            fx0, fy0, fx1, fy1 = t.cuboid_frac_bounds
            assert 0.0 <= fx0 <= fx1 <= 1.0 and 0.0 <= fy0 <= fy1 <= 1.0
            assert (fx1 - fx0) * (fy1 - fy0) >= 0.75 - 1e-9


class TestApplyTransform:
    def test_identity_is_bit_exact(self):
        cloud = random_cloud(0)
        view, keep = apply_transform(cloud, identity_transform())
        np.testing.assert_array_equal(view.points, cloud.points)
        np.testing.assert_array_equal(keep, np.arange(len(cloud)))

    def test_pure_rotation_isometry(self):
        cloud = random_cloud(1)
        theta = 0.7
        t = dataclasses.replace(identity_transform(), rot_angle_rad=theta)
        view, keep = apply_transform(cloud, t)
        assert np.all(keep >= 0)
        c, s = math.cos(theta), math.sin(theta)
        rot = np.array([[c, -s], [s, c]])
        np.testing.assert_allclose(view.points[:, :2], cloud.points[:, :2] @ rot.T, atol=1e-12)
        np.testing.assert_array_equal(view.points[:, 2:], cloud.points[:, 2:])
        np.testing.assert_allclose(
            np.linalg.norm(view.points[:, :2], axis=1),
            np.linalg.norm(cloud.points[:, :2], axis=1),
            atol=1e-12,
        )

    def test_pure_dropout_count_and_identity(self):
        cloud = random_cloud(2, n=1000)
        t = dataclasses.replace(identity_transform(), drop_frac=0.2)
        view, keep = apply_transform(cloud, t)
        assert len(view) == 1000 - math.floor(0.2 * 1000)
        survivors = keep >= 0
        np.testing.assert_array_equal(view.points, cloud.points[survivors])
        np.testing.assert_array_equal(view.source_indices, cloud.source_indices[survivors])

    def test_keep_map_is_injective(self):
        cloud = random_cloud(3)
        for seed in range(20):
            t = sample_transform(AugmentationConfig(), seed)
            view, keep = apply_transform(cloud, t)
            retained = keep[keep >= 0]
            assert len(np.unique(retained)) == len(retained)
            assert len(retained) == len(view)

    def test_geometric_steps_preserve_count(self):
        cloud = random_cloud(4)
        t = dataclasses.replace(
            identity_transform(), flip_axis="y", scale=1.03, rot_angle_rad=-0.3
        )
        view, keep = apply_transform(cloud, t)
        assert len(view) == len(cloud)
        assert np.all(keep >= 0)

    def test_reapplication_is_bit_exact(self):
        cloud = random_cloud(5)
        t = sample_transform(AugmentationConfig(), 123)
        v1, k1 = apply_transform(cloud, t)
        v2, k2 = apply_transform(cloud, t)
        np.testing.assert_array_equal(v1.points, v2.points)
        np.testing.assert_array_equal(k1, k2)


class TestMakeViewPair:
    def test_identity_config_views_equal_source(self):
        cloud = random_cloud(6)
        pair = make_view_pair(cloud, identity_config(), seed=9)
        np.testing.assert_array_equal(pair.s1.points, cloud.points)
        np.testing.assert_array_equal(pair.s2.points, cloud.points)

    def test_same_seed_bit_identical(self):
        cloud = random_cloud(7)
        a = make_view_pair(cloud, AugmentationConfig(), seed=11)
        b = make_view_pair(cloud, AugmentationConfig(), seed=11)
        np.testing.assert_array_equal(a.s1.points, b.s1.points)
        np.testing.assert_array_equal(a.s2.points, b.s2.points)
        np.testing.assert_array_equal(a.keep1, b.keep1)
        np.testing.assert_array_equal(a.keep2, b.keep2)

    def test_views_differ_from_each_other(self):
        cloud = random_cloud(8)
        pair = make_view_pair(cloud, AugmentationConfig(), seed=12)
        assert pair.t1 != pair.t2

    def test_inverse_transform_residual_within_noise_bound(self):
        cloud = random_cloud(9)
        for seed in range(10):
            pair = make_view_pair(cloud, AugmentationConfig(), seed=seed)
            for view, t, keep in ((pair.s1, pair.t1, pair.keep1), (pair.s2, pair.t2, pair.keep2)):
                retained = np.nonzero(keep >= 0)[0]
                back = t.invert_geometric(view.xyz[keep[retained]])
                residual = np.linalg.norm(back - cloud.xyz[retained], axis=1)
                # inverse maps the noisy point near the source; noise is iid per coord
                bound = 4.0 * max(t.coord_sigma, 1e-12) * math.sqrt(3) / t.scale + 1e-9
                assert np.all(residual <= bound)

    def test_retained_points_follow_transform_plus_noise(self):
        cloud = random_cloud(10)
        pair = make_view_pair(cloud, AugmentationConfig(), seed=77)
        retained = np.nonzero(pair.keep1 >= 0)[0]
        expected = pair.t1.apply_geometric(cloud.xyz[retained])
        got = pair.s1.xyz[pair.keep1[retained]]
        assert np.all(np.linalg.norm(got - expected, axis=1) <= 5 * pair.t1.coord_sigma + 1e-12)


class TestConfigValidation:
    def test_bad_probability_rejected(self):
        with pytest.raises(ValueError, match="flip_prob"):
            AugmentationConfig(flip_prob=1.5).validate()

    def test_unordered_range_rejected(self):
        with pytest.raises(ValueError, match="scale_range"):
            AugmentationConfig(scale_range=(1.1, 0.9)).validate()
