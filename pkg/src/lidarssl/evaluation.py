"""Desk-scale evaluation: embedding clustering and cross-view retrieval.

Both metrics probe what the training objective claims without any
fine-tuning: retrieval checks that matched proposals from two augmented
views are mutual nearest neighbours, and k-means purity over BEV cell
embeddings checks that cells of the same object family land in the same
clusters.
"""

from __future__ import annotations

import numpy as np

from .augment import AugmentationConfig, make_view_pair
from .bev import backbone_forward, cell_indices, grid_bounds
from .config import RunConfig
from .encoders import forward_scene
from .geometry import build_regions, fit_ground_plane
from .pointcloud import PointCloud
from .rng import derive_seed, make_rng


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


def kmeans(points: np.ndarray, k: int, seed: int, iters: int = 50):
    """Lloyd's algorithm with k-means++ seeding; returns (assignments, centroids).

    Empty clusters are reseeded to the point farthest from its assigned
    centroid.  Deterministic per seed; stops early once assignments are
    stable.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k > n:
        raise ValueError(f"k={k} exceeds the {n} available points")
    rng = make_rng(seed, "kmeans")

    # k-means++ seeding
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[int(rng.integers(n))]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[c] = points[int(rng.integers(n))]
        else:
            centroids[c] = points[int(rng.choice(n, p=d2 / total))]
        d2 = np.minimum(d2, ((points - centroids[c]) ** 2).sum(axis=1))

    assign = np.full(n, -1, dtype=np.int64)
    for _ in range(iters):
        dist = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(dist, axis=1)
        taken = np.zeros(n, dtype=bool)
        point_d2 = dist[np.arange(n), new_assign]
        for c in range(k):
            if not np.any(new_assign == c):
                far = int(np.argmax(np.where(taken, -np.inf, point_d2)))
                taken[far] = True
                centroids[c] = points[far]
                new_assign[far] = c
                point_d2[far] = 0.0
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = points[assign == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
    return assign, centroids


def kmeans_inertia(points: np.ndarray, assignments: np.ndarray, centroids: np.ndarray) -> float:
    diff = points - centroids[assignments]
    return float((diff * diff).sum())


def cluster_purity(assignments: np.ndarray, labels: np.ndarray) -> float:
    """Sum over clusters of the majority-label count, divided by n."""
    assignments = np.asarray(assignments)
    labels = np.asarray(labels)
    if assignments.shape != labels.shape:
        raise ValueError("assignments and labels must have equal length")
    total = 0
    for c in np.unique(assignments):
        _, counts = np.unique(labels[assignments == c], return_counts=True)
        total += counts.max()
    return total / len(labels)


def permutation_purity_baseline(
    assignments: np.ndarray, labels: np.ndarray, n_perm: int = 20, seed: int = 0
) -> float:
    """Mean purity of the same clustering against label permutations."""
    rng = make_rng(seed, "purity-baseline")
    vals = [cluster_purity(assignments, rng.permutation(labels)) for _ in range(n_perm)]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------


def cross_view_retrieval(proj_prop: np.ndarray) -> float:
    """Top-1 accuracy of matching view-1 rows to their view-2 pair by cosine."""
    proj = np.asarray(proj_prop, dtype=np.float64)
    v1 = proj[0::2]
    v2 = proj[1::2]
    v1 = v1 / np.maximum(np.linalg.norm(v1, axis=1, keepdims=True), 1e-12)
    v2 = v2 / np.maximum(np.linalg.norm(v2, axis=1, keepdims=True), 1e-12)
    nearest = np.argmax(v1 @ v2.T, axis=1)
    return float(np.mean(nearest == np.arange(len(v1))))


# ---------------------------------------------------------------------------
# pipeline hooks
# ---------------------------------------------------------------------------


def scene_proposal_projections(params, cloud: PointCloud, cfg: RunConfig, seed: int):
    """(proj_prop array, n_pairs) for one scene, or None if no proposals survive."""
    plane = fit_ground_plane(
        cloud,
        iters=cfg.geometry.ransac_iters,
        inlier_tol=cfg.geometry.ransac_inlier_tol,
        seed=derive_seed(seed, "plane"),
    )
    pair = make_view_pair(cloud, cfg.augment, derive_seed(seed, "aug"))
    g = cfg.geometry
    regions = build_regions(
        pair, plane, g.n_proposals, g.proposal_radius, g.proposal_max_points,
        g.num_patches, g.patch_offset, g.patch_radius, g.patch_max_points,
        derive_seed(seed, "regions"), margin=g.ground_margin,
    )
    if regions.n_pairs == 0:
        return None
    emb = forward_scene(params, pair, regions, cfg.model.grid_h, cfg.model.grid_w)
    return emb.proj_prop.values.copy(), regions.n_pairs


def retrieval_over_scenes(params, clouds, cfg: RunConfig, seed: int):
    """(mean top-1 accuracy, mean chance level 1/n_pairs) over usable scenes."""
    accs, chances = [], []
    for i, cloud in enumerate(clouds):
        out = scene_proposal_projections(params, cloud, cfg, derive_seed(seed, "retrieval", i))
        if out is None:
            continue
        proj, n_pairs = out
        accs.append(cross_view_retrieval(proj))
        chances.append(1.0 / n_pairs)
    if not accs:
        raise ValueError("no scene produced proposals")
    return float(np.mean(accs)), float(np.mean(chances))


def bev_cell_embeddings(params, cloud: PointCloud, class_labels: np.ndarray, cfg: RunConfig):
    """(features, labels) for grid cells containing points, on the raw scene.

    A cell's label is the majority class of its points (lowest class id on
    ties).
    """
    _, bev = backbone_forward(params, cloud, cfg.model.grid_h, cfg.model.grid_w)
    ids = cell_indices(cloud.points[:, :2], grid_bounds(cloud.points[:, :2]), bev.h, bev.w)
    grid = bev.grid.values
    feats, labels = [], []
    for cell in np.unique(ids):
        members = class_labels[ids == cell]
        values, counts = np.unique(members, return_counts=True)
        feats.append(grid[cell])
        labels.append(int(values[np.argmax(counts)]))
    return np.asarray(feats), np.asarray(labels, dtype=np.int64)
