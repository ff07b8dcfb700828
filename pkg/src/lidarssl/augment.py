"""Stochastic scene augmentation producing two tracked views of a source cloud.

A ``Transform`` freezes every random choice at sampling time (or stores a
sub-seed for the draws whose size depends on the cloud), so re-applying it
to the same cloud is bit-exact.  Application order is fixed: geometric
steps first (flip, scale, rotate about z), then the destructive ones
(point dropout, coordinate/intensity noise, cuboid crop, local sphere
drops).  Geometric steps never remove points, so the crop bounds stay
meaningful in the transformed frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .pointcloud import PointCloud
from .rng import derive_seed, make_rng


@dataclass
class AugmentationConfig:
    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.95, 1.05)
    rot_range_deg: tuple[float, float] = (-45.0, 45.0)
    rot_prob: float = 0.5
    drop_frac_max: float = 0.20
    coord_noise_sigma_range: tuple[float, float] = (0.0, 0.015)
    intensity_noise_sigma_range: tuple[float, float] = (0.0, 0.01)
    cuboid_min_area_frac: float = 0.75
    patch_drop_max_frac: float = 0.20
    patch_drop_radius: float = 2.0

    def validate(self) -> None:
        for name in ("flip_prob", "rot_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        for name in (
            "scale_range",
            "rot_range_deg",
            "coord_noise_sigma_range",
            "intensity_noise_sigma_range",
        ):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered, got ({lo}, {hi})")
        if not 0.0 <= self.drop_frac_max <= 1.0:
            raise ValueError("drop_frac_max must be in [0, 1]")
        if not 0.0 < self.cuboid_min_area_frac <= 1.0:
            raise ValueError("cuboid_min_area_frac must be in (0, 1]")
        if not 0.0 <= self.patch_drop_max_frac <= 1.0:
            raise ValueError("patch_drop_max_frac must be in [0, 1]")


@dataclass
class Transform:
    """Concrete augmentation: deterministic function of its fields."""

    flip_axis: str | None  # name of the coordinate that gets negated
    scale: float
    rot_angle_rad: float
    drop_frac: float
    drop_seed: int
    coord_sigma: float
    intensity_sigma: float
    noise_seed: int
    cuboid_frac_bounds: tuple[float, float, float, float]  # (fx0, fy0, fx1, fy1) of the xy bbox
    patch_drop_frac: float
    patch_drop_radius: float
    patch_seed: int

    def apply_geometric(self, xyz: np.ndarray) -> np.ndarray:
        """Flip -> scale -> rotate-z on (n, 3) coordinates; point count preserved."""
        out = np.array(xyz, dtype=np.float64).reshape(-1, 3)
        if self.flip_axis == "x":
            out[:, 0] = -out[:, 0]
        elif self.flip_axis == "y":
            out[:, 1] = -out[:, 1]
        out *= self.scale
        if self.rot_angle_rad != 0.0:
            c, s = math.cos(self.rot_angle_rad), math.sin(self.rot_angle_rad)
            x, y = out[:, 0].copy(), out[:, 1].copy()
            out[:, 0] = c * x - s * y
            out[:, 1] = s * x + c * y
        return out

    def invert_geometric(self, xyz: np.ndarray) -> np.ndarray:
        out = np.array(xyz, dtype=np.float64).reshape(-1, 3)
        if self.rot_angle_rad != 0.0:
            c, s = math.cos(-self.rot_angle_rad), math.sin(-self.rot_angle_rad)
            x, y = out[:, 0].copy(), out[:, 1].copy()
            out[:, 0] = c * x - s * y
            out[:, 1] = s * x + c * y
        out /= self.scale
        if self.flip_axis == "x":
            out[:, 0] = -out[:, 0]
        elif self.flip_axis == "y":
            out[:, 1] = -out[:, 1]
        return out


@dataclass
class SceneViewPair:
    """Source cloud plus two augmented views and their survival maps.

    ``keep1[i]`` / ``keep2[i]`` give the view row of source point i, or -1
    when the point was removed by that view's transform.
    """

    s0: PointCloud
    s1: PointCloud
    s2: PointCloud
    t1: Transform
    t2: Transform
    keep1: np.ndarray
    keep2: np.ndarray


def sample_transform(cfg: AugmentationConfig, seed: int) -> Transform:
    """Draw one Transform; every choice comes from a generator named after its step."""
    flip_axis = None
    r = make_rng(seed, "flip")
    if r.random() < cfg.flip_prob:
        flip_axis = "x" if r.random() < 0.5 else "y"

    scale = float(make_rng(seed, "scale").uniform(*cfg.scale_range))

    rot = 0.0
    r = make_rng(seed, "rotate")
    if r.random() < cfg.rot_prob:
        rot = math.radians(float(r.uniform(*cfg.rot_range_deg)))

    drop_frac = float(make_rng(seed, "dropout").uniform(0.0, cfg.drop_frac_max))

    r = make_rng(seed, "noise")
    coord_sigma = float(r.uniform(*cfg.coord_noise_sigma_range))
    intensity_sigma = float(r.uniform(*cfg.intensity_noise_sigma_range))

    r = make_rng(seed, "cuboid")
    area_frac = float(r.uniform(cfg.cuboid_min_area_frac, 1.0))
    fx_w = float(r.uniform(area_frac, 1.0))
    fy_w = area_frac / fx_w
    fx0 = float(r.uniform(0.0, 1.0 - fx_w))
    fy0 = float(r.uniform(0.0, 1.0 - fy_w))

    patch_frac = float(make_rng(seed, "patchdrop").uniform(0.0, cfg.patch_drop_max_frac))

    return Transform(
        flip_axis=flip_axis,
        scale=scale,
        rot_angle_rad=rot,
        drop_frac=drop_frac,
        drop_seed=derive_seed(seed, "dropout-mask"),
        coord_sigma=coord_sigma,
        intensity_sigma=intensity_sigma,
        noise_seed=derive_seed(seed, "noise-draw"),
        cuboid_frac_bounds=(fx0, fy0, fx0 + fx_w, fy0 + fy_w),
        patch_drop_frac=patch_frac,
        patch_drop_radius=cfg.patch_drop_radius,
        patch_seed=derive_seed(seed, "patchdrop-spheres"),
    )


_MAX_DROP_SPHERES = 8


def apply_transform(cloud: PointCloud, t: Transform) -> tuple[PointCloud, np.ndarray]:
    """Apply a Transform; returns the view and the source-index keep map."""
    n = len(cloud)
    pts = cloud.points.copy()
    pts[:, :3] = t.apply_geometric(pts[:, :3])
    alive = np.arange(n)

    # point dropout: exactly floor(frac * n) points removed
    k = int(math.floor(t.drop_frac * n))
    if k > 0:
        dropped = make_rng(t.drop_seed).choice(n, size=k, replace=False)
        mask = np.ones(n, dtype=bool)
        mask[dropped] = False
        alive = alive[mask]
        pts = pts[mask]

    # per-point noise on the survivors, intensity re-clamped
    if len(pts) and (t.coord_sigma > 0.0 or t.intensity_sigma > 0.0):
        r = make_rng(t.noise_seed)
        pts[:, :3] += r.normal(0.0, 1.0, size=(len(pts), 3)) * t.coord_sigma
        pts[:, 3] += r.normal(0.0, 1.0, size=len(pts)) * t.intensity_sigma
        pts[:, 3] = np.clip(pts[:, 3], 0.0, 1.0)

    # cuboid crop: keep points inside an xy-rectangle of the scene bbox
    if len(pts) and t.cuboid_frac_bounds != (0.0, 0.0, 1.0, 1.0):
        fx0, fy0, fx1, fy1 = t.cuboid_frac_bounds
        lo = pts[:, :2].min(axis=0)
        hi = pts[:, :2].max(axis=0)
        span = hi - lo
        x0, x1 = lo[0] + fx0 * span[0], lo[0] + fx1 * span[0]
        y0, y1 = lo[1] + fy0 * span[1], lo[1] + fy1 * span[1]
        inside = (
            (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)
        )
        alive = alive[inside]
        pts = pts[inside]

    # local occlusions: spheres centred on scene points, capped by a removal budget
    budget = int(math.floor(t.patch_drop_frac * len(pts)))
    if budget > 0:
        r = make_rng(t.patch_seed)
        for _ in range(_MAX_DROP_SPHERES):
            if len(pts) == 0:
                break
            centre = pts[int(r.integers(len(pts))), :3]
            inside = np.linalg.norm(pts[:, :3] - centre, axis=1) <= t.patch_drop_radius
            removed = int(inside.sum())
            if removed == 0 or removed > budget:
                continue
            budget -= removed
            alive = alive[~inside]
            pts = pts[~inside]

    keep = np.full(n, -1, dtype=np.int64)
    keep[alive] = np.arange(len(alive), dtype=np.int64)
    view = PointCloud(points=pts, source_indices=cloud.source_indices[alive])
    return view, keep


def make_view_pair(s0: PointCloud, cfg: AugmentationConfig, seed: int) -> SceneViewPair:
    """Sample two independent transforms and build both tracked views."""
    t1 = sample_transform(cfg, derive_seed(seed, "view-1"))
    t2 = sample_transform(cfg, derive_seed(seed, "view-2"))
    s1, keep1 = apply_transform(s0, t1)
    s2, keep2 = apply_transform(s0, t2)
    return SceneViewPair(s0=s0, s1=s1, s2=s2, t1=t1, t2=t2, keep1=keep1, keep2=keep2)
