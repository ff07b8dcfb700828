"""Synthetic labelled scenes: a planted ground plane plus primitive objects.

Three object families with distinct geometry and reflectance bands so a
learned embedding has something to discriminate: box-like (cuboid shells),
post-like (thin vertical cylinders), and wall-like (vertical rectangles).
Instance centers keep at least ``min_separation`` meters apart so a
proposal sphere never straddles two objects.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .pointcloud import PointCloud, write_cloud_bin
from .rng import derive_seed, make_rng

CLASS_NAMES = ("ground", "box", "post", "wall")
_INTENSITY_BANDS = {1: (0.45, 0.60), 2: (0.80, 0.95), 3: (0.20, 0.32)}


@dataclass
class SyntheticSceneSpec:
    extent: float = 12.0  # scene spans [-extent/2, extent/2] in x and y
    ground_points: int = 220
    instance_count_range: tuple[int, int] = (5, 8)
    instance_points_range: tuple[int, int] = (90, 150)
    noise_sigma: float = 0.02
    min_separation: float = 2.0  # >= twice the proposal radius


@dataclass
class SyntheticScene:
    cloud: PointCloud
    point_labels: np.ndarray  # per point: 0 = ground, 1..k = instance id
    instance_classes: np.ndarray = field(default=None)  # type: ignore[assignment]
    # instance_classes[i] is the class (1..3) of instance id i+1

    def class_labels(self) -> np.ndarray:
        """Per-point class in {0: ground, 1: box, 2: post, 3: wall}."""
        lut = np.concatenate([[0], self.instance_classes])
        return lut[self.point_labels]


def _sample_box(rng, n: int) -> np.ndarray:
    lx, ly = rng.uniform(0.7, 1.3, size=2)
    h = rng.uniform(0.5, 1.0)
    # 4 side walls + top, weighted by area
    areas = np.array([ly * h, ly * h, lx * h, lx * h, lx * ly])
    faces = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(0.0, 1.0, size=n)
    pts = np.empty((n, 3))
    for i, f in enumerate(faces):
        if f < 2:  # x = +-lx/2 walls
            pts[i] = ((lx / 2) * (1 if f == 0 else -1), u[i] * ly, v[i] * h)
        elif f < 4:  # y = +-ly/2 walls
            pts[i] = (u[i] * lx, (ly / 2) * (1 if f == 2 else -1), v[i] * h)
        else:  # top
            pts[i] = (u[i] * lx, (v[i] - 0.5) * ly, h)
    return pts


def _sample_post(rng, n: int) -> np.ndarray:
    r = rng.uniform(0.06, 0.15)
    h = rng.uniform(1.2, 2.2)
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    z = rng.uniform(0.0, h, size=n)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


def _sample_wall(rng, n: int) -> np.ndarray:
    length = rng.uniform(1.4, 2.2)
    h = rng.uniform(0.9, 1.6)
    yaw = rng.uniform(0.0, np.pi)
    u = rng.uniform(-0.5, 0.5, size=n) * length
    z = rng.uniform(0.0, h, size=n)
    return np.column_stack([u * np.cos(yaw), u * np.sin(yaw), z])


_SAMPLERS = {1: _sample_box, 2: _sample_post, 3: _sample_wall}


def generate_synthetic_scene(seed: int, spec: SyntheticSceneSpec) -> SyntheticScene:
    """Deterministic labelled scene for the given seed."""
    rng = make_rng(seed, "scene")
    half = spec.extent / 2.0

    gx = rng.uniform(-half, half, size=spec.ground_points)
    gy = rng.uniform(-half, half, size=spec.ground_points)
    gz = rng.normal(0.0, spec.noise_sigma, size=spec.ground_points)
    gi = rng.uniform(0.02, 0.12, size=spec.ground_points)
    points = [np.column_stack([gx, gy, gz, gi])]
    labels = [np.zeros(spec.ground_points, dtype=np.int64)]

    target = int(rng.integers(spec.instance_count_range[0], spec.instance_count_range[1] + 1))
    centers: list[np.ndarray] = []
    classes: list[int] = []
    margin = 1.2  # keep objects off the scene edge
    for _ in range(target):
        placed = None
        for _attempt in range(200):
            cand = rng.uniform(-half + margin, half - margin, size=2)
            if all(np.linalg.norm(cand - c) >= spec.min_separation for c in centers):
                placed = cand
                break
        if placed is None:
            continue  # scene too crowded; emit fewer instances
        centers.append(placed)
        cls = int(rng.integers(1, 4))
        classes.append(cls)
        n = int(rng.integers(spec.instance_points_range[0], spec.instance_points_range[1] + 1))
        xyz = _SAMPLERS[cls](rng, n)
        xyz[:, :2] += placed
        xyz += rng.normal(0.0, spec.noise_sigma, size=xyz.shape)
        lo, hi = _INTENSITY_BANDS[cls]
        intensity = np.clip(rng.uniform(lo, hi, size=n), 0.0, 1.0)
        points.append(np.column_stack([xyz, intensity]))
        labels.append(np.full(n, len(centers), dtype=np.int64))

    cloud = PointCloud(points=np.concatenate(points))
    return SyntheticScene(
        cloud=cloud,
        point_labels=np.concatenate(labels),
        instance_classes=np.array(classes, dtype=np.int64),
    )


def write_scene(scene: SyntheticScene, bin_path, labels_path) -> None:
    """Scan to ``.bin``; labels as text lines '<instance_id> <class_id>'."""
    write_cloud_bin(scene.cloud, bin_path)
    class_per_point = scene.class_labels()
    with open(labels_path, "w", encoding="utf-8") as fh:
        for inst, cls in zip(scene.point_labels, class_per_point):
            fh.write(f"{inst} {cls}\n")


def read_labels(labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of the label writer: (instance_ids, class_ids)."""
    data = np.loadtxt(labels_path, dtype=np.int64, ndmin=2)
    return data[:, 0], data[:, 1]


def generate_dataset(out_dir, count: int, seed: int, spec: SyntheticSceneSpec | None = None) -> list[str]:
    """Write ``count`` scenes into ``out_dir``; returns the scan paths in order."""
    spec = spec or SyntheticSceneSpec()
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i in range(count):
        scene = generate_synthetic_scene(seed=derive_seed(seed, "synthetic-scene", i), spec=spec)
        bin_path = os.path.join(out_dir, f"scene_{i:05d}.bin")
        write_scene(scene, bin_path, os.path.join(out_dir, f"scene_{i:05d}.labels.txt"))
        paths.append(bin_path)
    return paths
