"""Region machinery: ground removal, query sampling, proposal and patch extraction.

Queries are sampled on the source cloud among foreground points that
survive in both views, so every proposal pair shares one physical query
point.  Proposal centers are the query's source coordinates pushed through
each view's geometric transform; membership is resolved in the view's own
frame with a fixed-radius ball query.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import SceneViewPair
from .pointcloud import PointCloud
from .rng import derive_seed, make_rng


class PlaneFitError(RuntimeError):
    """Raised when RANSAC cannot find a single non-degenerate sample."""


@dataclass
class PlaneModel:
    """Plane n.x = offset with ||n|| = 1 and n_z >= 0."""

    normal: np.ndarray
    offset: float
    inlier_mask: np.ndarray

    def signed_distance(self, xyz: np.ndarray) -> np.ndarray:
        return np.asarray(xyz).reshape(-1, 3) @ self.normal - self.offset


@dataclass
class Proposal:
    view_id: int  # 1 or 2
    query_index: int  # index into the source cloud
    center: np.ndarray  # (3,) in view coordinates
    member_view_indices: np.ndarray  # ascending view row indices, <= k_pr of them
    pair_slot: int


@dataclass
class Patch:
    view_id: int
    pair_slot: int
    slot: int  # 0..m-1
    keypoint: np.ndarray  # (3,) view coordinates of the patch origin
    member_view_indices: np.ndarray
    rel_center: np.ndarray  # keypoint - proposal center


@dataclass
class RegionSet:
    """Paired proposals and their patches for one scene-view pair."""

    pairs: list[tuple[Proposal, Proposal]]
    patches1: list[list[Patch]]  # per pair slot, m patches in view 1
    patches2: list[list[Patch]]

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)


def fit_ground_plane(
    cloud: PointCloud, iters: int = 100, inlier_tol: float = 0.15, seed: int = 0
) -> PlaneModel:
    """RANSAC over 3-point samples, then a least-squares refit on the winners."""
    xyz = cloud.xyz
    n = len(xyz)
    if n < 3:
        raise PlaneFitError(f"need at least 3 points, got {n}")
    rng = make_rng(seed, "ransac")
    best_count = -1
    best_mask = None
    for _ in range(iters):
        i, j, k = rng.choice(n, size=3, replace=False)
        v1 = xyz[j] - xyz[i]
        v2 = xyz[k] - xyz[i]
        normal = np.cross(v1, v2)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue  # collinear sample
        normal = normal / norm
        offset = float(normal @ xyz[i])
        mask = np.abs(xyz @ normal - offset) <= inlier_tol
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_mask is None:
        raise PlaneFitError("all RANSAC samples were degenerate")

    # refit: plane through the inlier centroid, normal = smallest-variance direction
    inliers = xyz[best_mask]
    centroid = inliers.mean(axis=0)
    _, _, vt = np.linalg.svd(inliers - centroid, full_matrices=False)
    normal = vt[-1]
    if normal[2] < 0:
        normal = -normal
    offset = float(normal @ centroid)
    mask = np.abs(xyz @ normal - offset) <= inlier_tol
    return PlaneModel(normal=normal, offset=offset, inlier_mask=mask)


def remove_background(cloud: PointCloud, plane: PlaneModel, margin: float) -> PointCloud:
    """Keep points strictly above the plane by more than ``margin`` meters."""
    keep = plane.signed_distance(cloud.xyz) > margin
    return PointCloud(points=cloud.points[keep], source_indices=cloud.source_indices[keep])


def foreground_mask(cloud: PointCloud, plane: PlaneModel, margin: float) -> np.ndarray:
    return plane.signed_distance(cloud.xyz) > margin


def farthest_point_sampling(points: np.ndarray, count: int, start: int) -> np.ndarray:
    """Greedy max-min-distance subset; ties resolve to the lowest index."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if count > n:
        raise ValueError(f"count {count} exceeds point count {n}")
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    dists = np.linalg.norm(points - points[start], axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(dists))
        chosen[i] = nxt
        dists = np.minimum(dists, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


def _ball_select(d: np.ndarray, radius: float, k_max: int, rng_seed: int) -> np.ndarray:
    """Ball-query selection given precomputed distances to the center."""
    in_range = np.nonzero(d <= radius)[0]
    if len(in_range) <= k_max:
        return in_range.astype(np.int64)
    nearest = in_range[int(np.argmin(d[in_range]))]
    rest = in_range[in_range != nearest]
    picked = make_rng(rng_seed, "ball-subsample").choice(rest, size=k_max - 1, replace=False)
    return np.sort(np.concatenate([[nearest], picked])).astype(np.int64)


def ball_query(
    points: np.ndarray, center: np.ndarray, radius: float, k_max: int, rng_seed: int
) -> np.ndarray:
    """Ascending indices within ``radius`` of ``center``, at most ``k_max``.

    Oversized neighbourhoods are subsampled uniformly (seeded) but always
    retain the point nearest the center.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    diff = points - np.asarray(center).reshape(3)
    d = np.sqrt((diff * diff).sum(axis=1))
    return _ball_select(d, radius, k_max, rng_seed)


def extract_proposal_pairs(
    pair: SceneViewPair,
    plane: PlaneModel,
    n_proposals: int,
    radius: float,
    k_max: int,
    seed: int,
    margin: float = 0.20,
) -> list[tuple[Proposal, Proposal]]:
    """Paired fixed-radius proposals around FPS queries visible in both views."""
    fg = foreground_mask(pair.s0, plane, margin)
    candidates = np.nonzero(fg & (pair.keep1 >= 0) & (pair.keep2 >= 0))[0]
    if len(candidates) == 0:
        return []
    count = min(n_proposals, len(candidates))
    start = int(make_rng(seed, "fps-start").integers(len(candidates)))
    order = farthest_point_sampling(pair.s0.xyz[candidates], count, start)
    queries = candidates[order]

    views = ((1, pair.s1, pair.t1), (2, pair.s2, pair.t2))
    per_view = []
    for view_id, view, transform in views:
        centers = transform.apply_geometric(pair.s0.xyz[queries])
        diff = centers[:, None, :] - view.xyz[None, :, :]
        dists = np.sqrt((diff * diff).sum(axis=2))  # (n_queries, n_view_points)
        per_view.append((view_id, centers, dists))

    pairs: list[tuple[Proposal, Proposal]] = []
    for rank, q in enumerate(queries):
        found = []
        for view_id, centers, dists in per_view:
            members = _ball_select(
                dists[rank], radius, k_max, derive_seed(seed, "members", view_id, rank)
            )
            if len(members) == 0:
                found = None
                break
            found.append(
                Proposal(
                    view_id=view_id,
                    query_index=int(q),
                    center=centers[rank],
                    member_view_indices=members,
                    pair_slot=-1,
                )
            )
        if found is None:
            continue  # noise pushed the query itself out of range; drop the slot
        slot = len(pairs)
        for p in found:
            p.pair_slot = slot
        pairs.append((found[0], found[1]))
    return pairs


_KEYPOINT_OFFSETS = np.array(
    [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]]
)


def _xyz(points: np.ndarray) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    return arr.reshape(len(arr), -1)[:, :3]


def select_patch_keypoints(
    proposal: Proposal, view_points: np.ndarray, t: float
) -> np.ndarray:
    """Four patch origins: the members nearest to center +- t along x and y.

    Candidates may share a nearest member; keypoints are allowed to coincide.
    """
    members = _xyz(view_points)[proposal.member_view_indices]
    if len(members) == 0:
        raise ValueError("proposal has no members")
    candidates = proposal.center[None, :] + t * _KEYPOINT_OFFSETS
    diff = members[:, None, :] - candidates[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=2))  # (k, 4)
    return members[np.argmin(d, axis=0)]


def extract_patches(
    proposal: Proposal,
    view_points: np.ndarray,
    t: float,
    radius: float,
    k_max: int,
    seed: int,
) -> list[Patch]:
    """Ball queries around the four keypoints, restricted to proposal members."""
    view_xyz = _xyz(view_points)
    members = proposal.member_view_indices
    member_xyz = view_xyz[members]
    keypoints = select_patch_keypoints(proposal, view_xyz, t)
    diff = member_xyz[:, None, :] - keypoints[None, :, :]
    dists = np.sqrt((diff * diff).sum(axis=2))  # (k, 4)
    patches = []
    for slot, kp in enumerate(keypoints):
        local = _ball_select(dists[:, slot], radius, k_max, derive_seed(seed, "patch", slot))
        patches.append(
            Patch(
                view_id=proposal.view_id,
                pair_slot=proposal.pair_slot,
                slot=slot,
                keypoint=kp,
                member_view_indices=members[local],
                rel_center=kp - proposal.center,
            )
        )
    return patches


def build_regions(
    pair: SceneViewPair,
    plane: PlaneModel,
    n_proposals: int,
    proposal_radius: float,
    proposal_k: int,
    num_patches: int,
    patch_offset: float,
    patch_radius: float,
    patch_k: int,
    seed: int,
    margin: float = 0.20,
) -> RegionSet:
    """Proposal pairs plus per-slot patches for both views (patches skipped for m=0)."""
    pairs = extract_proposal_pairs(
        pair, plane, n_proposals, proposal_radius, proposal_k, seed, margin=margin
    )
    patches1: list[list[Patch]] = []
    patches2: list[list[Patch]] = []
    if num_patches > 0:
        for p1, p2 in pairs:
            patches1.append(
                extract_patches(
                    p1, pair.s1.points, patch_offset, patch_radius, patch_k,
                    derive_seed(seed, "patches", 1, p1.pair_slot),
                )
            )
            patches2.append(
                extract_patches(
                    p2, pair.s2.points, patch_offset, patch_radius, patch_k,
                    derive_seed(seed, "patches", 2, p2.pair_slot),
                )
            )
    return RegionSet(pairs=pairs, patches1=patches1, patches2=patches2)
