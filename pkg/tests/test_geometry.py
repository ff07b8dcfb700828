import numpy as np
import pytest

from lidarssl.augment import AugmentationConfig, make_view_pair
from lidarssl.geometry import (
    PlaneFitError,
    ball_query,
    extract_patches,
    extract_proposal_pairs,
    farthest_point_sampling,
    fit_ground_plane,
    remove_background,
    select_patch_keypoints,
)
from lidarssl.pointcloud import PointCloud
from lidarssl.rng import make_rng

from test_augment import identity_config


def planted_plane_cloud(seed, n_ground=500, n_outliers=50, sigma=0.0):
    r = np.random.default_rng(seed)
    gx = r.uniform(-10, 10, size=(n_ground, 2))
    gz = r.normal(0, sigma, size=n_ground) if sigma else np.zeros(n_ground)
    ground = np.column_stack([gx, gz, r.uniform(0, 1, size=n_ground)])
    ox = r.uniform(-10, 10, size=(n_outliers, 2))
    outliers = np.column_stack([ox, np.full(n_outliers, 5.0), r.uniform(0, 1, size=n_outliers)])
    return PointCloud(points=np.vstack([ground, outliers])), n_ground


class TestFitGroundPlane:
    def test_planted_plane_recovered(self):
        cloud, n_ground = planted_plane_cloud(0)
        plane = fit_ground_plane(cloud, iters=100, inlier_tol=0.15, seed=1)
        np.testing.assert_allclose(plane.normal, [0, 0, 1], atol=1e-9)
        assert abs(plane.offset) <= 1e-9
        assert plane.inlier_mask[:n_ground].all()
        assert not plane.inlier_mask[n_ground:].any()

    def test_tilted_plane_normal(self):
        r = np.random.default_rng(1)
        xy = r.uniform(-10, 10, size=(400, 2))
        z = 0.1 * xy[:, 0]
        cloud = PointCloud(np.column_stack([xy, z, r.uniform(0, 1, 400)]))
        plane = fit_ground_plane(cloud, seed=0)
        expected = np.array([-0.1, 0.0, 1.0]) / np.linalg.norm([-0.1, 0.0, 1.0])
        angle = np.arccos(np.clip(plane.normal @ expected, -1, 1))
        assert angle < 1e-6
        np.testing.assert_allclose(expected, [-0.09950372, 0.0, 0.99503719], atol=1e-7)

    def test_noisy_recall_over_seeds(self):
        recalls = []
        for seed in range(50):
            cloud, n_ground = planted_plane_cloud(seed, sigma=0.02)
            plane = fit_ground_plane(cloud, iters=100, inlier_tol=0.06, seed=seed)
            recalls.append(plane.inlier_mask[:n_ground].mean())
        assert np.mean(recalls) >= 0.99

    def test_deterministic(self):
        cloud, _ = planted_plane_cloud(3, sigma=0.02)
        a = fit_ground_plane(cloud, seed=5)
        b = fit_ground_plane(cloud, seed=5)
        np.testing.assert_array_equal(a.normal, b.normal)
        assert a.offset == b.offset

    def test_too_few_points(self):
        with pytest.raises(PlaneFitError):
            fit_ground_plane(PointCloud(np.zeros((2, 4))), seed=0)

    def test_canonical_orientation(self):
        for seed in range(10):
            cloud, _ = planted_plane_cloud(seed, sigma=0.01)
            plane = fit_ground_plane(cloud, seed=seed)
            assert plane.normal[2] >= 0
            assert abs(np.linalg.norm(plane.normal) - 1.0) <= 1e-10


class TestRemoveBackground:
    def test_margin_thresholding(self):
        cloud, _ = planted_plane_cloud(0)
        plane = fit_ground_plane(cloud, seed=0)
        pts = PointCloud(np.array([[0, 0, 0.1, 0.5], [0, 0, 0.5, 0.5]]))
        out = remove_background(pts, plane, margin=0.2)
        assert len(out) == 1
        np.testing.assert_allclose(out.points[0, 2], 0.5)

    def test_all_ground_empty_result(self):
        cloud, _ = planted_plane_cloud(1)
        plane = fit_ground_plane(cloud, seed=0)
        ground_only = PointCloud(cloud.points[:100])
        assert len(remove_background(ground_only, plane, margin=0.2)) == 0

    def test_partition_property(self):
        cloud, _ = planted_plane_cloud(2, sigma=0.02)
        plane = fit_ground_plane(cloud, seed=0)
        kept = remove_background(cloud, plane, margin=0.2)
        removed_mask = plane.signed_distance(cloud.xyz) <= 0.2
        assert len(kept) + removed_mask.sum() == len(cloud)
        union = np.union1d(kept.source_indices, cloud.source_indices[removed_mask])
        np.testing.assert_array_equal(union, cloud.source_indices)


class TestFarthestPointSampling:
    def test_count_equals_n(self):
        pts = np.random.default_rng(0).normal(size=(10, 3))
        idx = farthest_point_sampling(pts, 10, start=0)
        assert sorted(idx) == list(range(10))

    def test_collinear_hand_trace(self):
        pts = np.column_stack([np.arange(11.0), np.zeros(11), np.zeros(11)])
        idx = farthest_point_sampling(pts, 3, start=0)
        np.testing.assert_array_equal(idx, [0, 10, 5])

    def test_count_exceeds_n(self):
        with pytest.raises(ValueError):
            farthest_point_sampling(np.zeros((3, 3)), 4, start=0)

    def test_greedy_trace_replay(self):
        # every chosen point attains the maximal min-distance at its step
        for seed in range(100):
            r = np.random.default_rng(seed)
            pts = r.normal(size=(40, 3))
            count = int(r.integers(2, 15))
            start = int(r.integers(40))
            idx = farthest_point_sampling(pts, count, start)
            assert idx[0] == start
            dists = np.linalg.norm(pts - pts[start], axis=1)
            for step in range(1, count):
                best = dists.max()
                assert dists[idx[step]] == best
                assert idx[step] == np.argmax(dists)  # lowest-index tie break
                dists = np.minimum(dists, np.linalg.norm(pts - pts[idx[step]], axis=1))

    def test_dominates_random_subsets(self):
        def min_pairwise(pts):
            d = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
            return d[np.triu_indices(len(pts), k=1)].min()

        wins = 0
        for trial in range(100):
            r = np.random.default_rng(trial)
            pts = r.normal(size=(60, 3))
            k = 8
            fps_pts = pts[farthest_point_sampling(pts, k, start=0)]
            rand_pts = pts[r.choice(60, size=k, replace=False)]
            wins += min_pairwise(fps_pts) >= min_pairwise(rand_pts)
        assert wins == 100


class TestBallQuery:
    def test_empty_when_nothing_in_range(self):
        pts = np.ones((5, 3)) * 10
        assert len(ball_query(pts, np.zeros(3), 1.0, 16, rng_seed=0)) == 0

    def test_all_returned_when_under_cap(self):
        r = np.random.default_rng(0)
        pts = r.normal(size=(5, 3)) * 0.1
        idx = ball_query(pts, np.zeros(3), 1.0, 16, rng_seed=0)
        np.testing.assert_array_equal(idx, np.arange(5))

    def test_subsample_keeps_nearest_and_cap(self):
        for seed in range(50):
            r = np.random.default_rng(seed)
            pts = r.uniform(-0.9, 0.9, size=(40, 3))
            d = np.linalg.norm(pts, axis=1)
            idx = ball_query(pts, np.zeros(3), 1.0, 16, rng_seed=seed)
            assert len(idx) == 16
            assert np.all(d[idx] <= 1.0)
            assert np.argmin(d) in idx
            assert np.all(np.diff(idx) > 0)  # ascending, unique

    def test_deterministic(self):
        pts = np.random.default_rng(1).uniform(-1, 1, size=(50, 3))
        a = ball_query(pts, np.zeros(3), 1.0, 8, rng_seed=3)
        b = ball_query(pts, np.zeros(3), 1.0, 8, rng_seed=3)
        np.testing.assert_array_equal(a, b)

    def test_bad_radius(self):
        with pytest.raises(ValueError):
            ball_query(np.zeros((1, 3)), np.zeros(3), 0.0, 4, rng_seed=0)


def scene_with_objects(seed, n_objects=3, object_points=60, spread=8.0):
    """Ground plane plus separated compact objects; returns (cloud, object slices)."""
    r = np.random.default_rng(seed)
    ground_xy = r.uniform(-spread, spread, size=(300, 2))
    ground = np.column_stack([ground_xy, np.zeros(300), r.uniform(0, 1, 300)])
    parts = [ground]
    slices = []
    centers = [
        np.array([spread * 0.6 * np.cos(a), spread * 0.6 * np.sin(a)])
        for a in np.linspace(0, 2 * np.pi, n_objects, endpoint=False)
    ]
    start = 300
    for c in centers:
        xyz = r.uniform(-0.4, 0.4, size=(object_points, 3)) + np.array([c[0], c[1], 1.0])
        parts.append(np.column_stack([xyz, r.uniform(0, 1, object_points)]))
        slices.append(slice(start, start + object_points))
        start += object_points
    return PointCloud(np.vstack(parts)), slices


class TestExtractProposalPairs:
    def test_identity_views_give_matching_members(self):
        cloud, _ = scene_with_objects(0)
        pair = make_view_pair(cloud, identity_config(), seed=0)
        plane = fit_ground_plane(cloud, seed=0)
        pairs = extract_proposal_pairs(pair, plane, 8, radius=1.0, k_max=16, seed=0)
        assert len(pairs) > 0
        for p1, p2 in pairs:
            np.testing.assert_array_equal(
                pair.s1.source_indices[p1.member_view_indices],
                pair.s2.source_indices[p2.member_view_indices],
            )

    def test_dropped_query_excluded_by_construction(self):
        cloud, _ = scene_with_objects(1)
        pair = make_view_pair(cloud, AugmentationConfig(), seed=5)
        plane = fit_ground_plane(cloud, seed=0)
        pairs = extract_proposal_pairs(pair, plane, 16, radius=1.0, k_max=16, seed=2)
        for p1, p2 in pairs:
            assert pair.keep1[p1.query_index] >= 0
            assert pair.keep2[p2.query_index] >= 0

    def test_planted_objects_stay_separate(self):
        cloud, slices = scene_with_objects(2, n_objects=3)
        pair = make_view_pair(cloud, identity_config(), seed=0)
        plane = fit_ground_plane(cloud, seed=0)
        pairs = extract_proposal_pairs(pair, plane, 3, radius=1.0, k_max=64, seed=3)
        for p1, _ in pairs:
            sources = pair.s1.source_indices[p1.member_view_indices]
            owners = {i for i, sl in enumerate(slices) for s in sources if sl.start <= s < sl.stop}
            assert len(owners) == 1

    def test_zero_candidates_empty_list(self):
        r = np.random.default_rng(0)
        flat = np.column_stack([r.uniform(-5, 5, (200, 2)), np.zeros(200), r.uniform(0, 1, 200)])
        cloud = PointCloud(flat)
        pair = make_view_pair(cloud, identity_config(), seed=0)
        plane = fit_ground_plane(cloud, seed=0)
        assert extract_proposal_pairs(pair, plane, 8, 1.0, 16, seed=0) == []

    def test_pair_slots_are_contiguous_and_shared(self):
        cloud, _ = scene_with_objects(4)
        pair = make_view_pair(cloud, AugmentationConfig(), seed=8)
        plane = fit_ground_plane(cloud, seed=0)
        pairs = extract_proposal_pairs(pair, plane, 10, 1.0, 16, seed=4)
        for slot, (p1, p2) in enumerate(pairs):
            assert p1.pair_slot == p2.pair_slot == slot
            assert p1.query_index == p2.query_index


class TestPatches:
    def _proposal(self, seed=0):
        cloud, _ = scene_with_objects(seed)
        pair = make_view_pair(cloud, identity_config(), seed=0)
        plane = fit_ground_plane(cloud, seed=0)
        pairs = extract_proposal_pairs(pair, plane, 4, 1.0, 16, seed=seed)
        return pairs[0][0], pair.s1

    def test_keypoint_candidates_at_offsets(self):
        proposal, view = self._proposal()
        t = 1.0 / 3.0
        kps = select_patch_keypoints(proposal, view.points, t)
        members = view.xyz[proposal.member_view_indices]
        offsets = np.array([[t, 0, 0], [-t, 0, 0], [0, t, 0], [0, -t, 0]])
        for i, kp in enumerate(kps):
            cand = proposal.center + offsets[i]
            d = np.linalg.norm(members - cand, axis=1)
            assert np.allclose(kp, members[np.argmin(d)])

    def test_single_point_proposal_keypoints_coincide(self):
        proposal, view = self._proposal()
        import dataclasses

        single = dataclasses.replace(proposal, member_view_indices=proposal.member_view_indices[:1])
        kps = select_patch_keypoints(single, view.points, 1.0 / 3.0)
        only = view.xyz[single.member_view_indices[0]]
        for kp in kps:
            np.testing.assert_array_equal(kp, only)

    def test_member_exactly_at_candidate_is_chosen(self):
        import dataclasses

        pts = np.array(
            [[1 / 3, 0.0, 1.0, 0.5], [0.3, 0.05, 1.0, 0.5], [0.0, 0.0, 1.0, 0.5]]
        )
        view = PointCloud(pts)
        proposal, _ = self._proposal()
        prop = dataclasses.replace(
            proposal, center=np.array([0.0, 0.0, 1.0]), member_view_indices=np.arange(3)
        )
        kps = select_patch_keypoints(prop, view.points, 1.0 / 3.0)
        np.testing.assert_array_equal(kps[0], pts[0, :3])

    def test_patch_members_subset_of_proposal(self):
        proposal, view = self._proposal(1)
        patches = extract_patches(proposal, view.points, 1 / 3, 1 / 3, 8, seed=0)
        assert len(patches) == 4
        for p in patches:
            assert set(p.member_view_indices) <= set(proposal.member_view_indices)
            assert len(p.member_view_indices) >= 1
            d = np.linalg.norm(view.xyz[p.member_view_indices] - p.keypoint, axis=1)
            assert np.all(d <= 1 / 3)
            np.testing.assert_array_equal(p.rel_center, p.keypoint - proposal.center)

    def test_patch_equals_ball_query_composition(self):
        from lidarssl.rng import derive_seed

        proposal, view = self._proposal(2)
        seed = 17
        patches = extract_patches(proposal, view.points, 1 / 3, 1 / 3, 4, seed=seed)
        member_xyz = view.xyz[proposal.member_view_indices]
        kps = select_patch_keypoints(proposal, view.points, 1 / 3)
        for slot, p in enumerate(patches):
            local = ball_query(member_xyz, kps[slot], 1 / 3, 4, derive_seed(seed, "patch", slot))
            np.testing.assert_array_equal(
                p.member_view_indices, proposal.member_view_indices[local]
            )

    def test_dense_proposal_patch_coverage(self):
        # uniform ball sampling: the four patches cover most of the proposal
        import dataclasses

        r = np.random.default_rng(0)
        raw = r.normal(size=(400, 3))
        raw = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        raw *= r.uniform(0, 1, size=(400, 1)) ** (1 / 3)
        view = PointCloud(np.column_stack([raw, r.uniform(0, 1, 400)]))
        proposal, _ = self._proposal()
        prop = dataclasses.replace(
            proposal, center=np.zeros(3), member_view_indices=np.arange(400)
        )
        patches = extract_patches(prop, view.points, 1 / 3, 1 / 3, 400, seed=0)
        covered = set()
        for p in patches:
            covered.update(p.member_view_indices.tolist())
        # patches live near the equator plane; compare against members there
        assert len(covered) >= 0.6 * 400 * 0.35


class TestRandomProposalInvariants:
    def test_radius_and_cap_hold_exactly(self):
        checked = 0
        seed = 0
        while checked < 1000:
            cloud, _ = scene_with_objects(seed, n_objects=4, object_points=40)
            pair = make_view_pair(cloud, AugmentationConfig(), seed=seed)
            plane = fit_ground_plane(cloud, seed=seed)
            pairs = extract_proposal_pairs(pair, plane, 16, 1.0, 16, seed=seed)
            for p1, p2 in pairs:
                for prop, view in ((p1, pair.s1), (p2, pair.s2)):
                    d = np.linalg.norm(view.xyz[prop.member_view_indices] - prop.center, axis=1)
                    assert np.all(d <= 1.0)
                    assert 1 <= len(prop.member_view_indices) <= 16
                    checked += 1
            seed += 1
        assert checked >= 1000
