"""Bird's-eye-view feature grid: per-point features scattered onto 2D cells.

The backbone is a per-point MLP over bound-normalised raw channels,
scatter-max aggregation into an H x W grid over the view's xy bounding
box, and one 3x3 convolution.  Points read features back off the grid by
bilinear interpolation over the four surrounding cell centers; everything
is differentiable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .pointcloud import PointCloud
from .tensor import Tensor

_MIN_SPAN = 1e-6  # degenerate bounding boxes get a nominal span


@dataclass
class BevFeatureMap:
    grid: Tensor  # (h*w, c), row-major over (row, col); cells without points are zero-fed
    h: int
    w: int
    bounds: tuple[float, float, float, float]  # x_min, x_max, y_min, y_max

    @property
    def cell_size(self) -> tuple[float, float]:
        x_min, x_max, y_min, y_max = self.bounds
        return (x_max - x_min) / self.w, (y_max - y_min) / self.h


def grid_bounds(xy: np.ndarray) -> tuple[float, float, float, float]:
    lo = xy.min(axis=0)
    hi = xy.max(axis=0)
    x_min, x_max = float(lo[0]), float(hi[0])
    y_min, y_max = float(lo[1]), float(hi[1])
    if x_max - x_min < _MIN_SPAN:
        x_min, x_max = x_min - 0.5, x_max + 0.5
    if y_max - y_min < _MIN_SPAN:
        y_min, y_max = y_min - 0.5, y_max + 0.5
    return x_min, x_max, y_min, y_max


def cell_indices(xy: np.ndarray, bounds, h: int, w: int) -> np.ndarray:
    """Flattened (row * w + col) cell id per point; border points clamp inward."""
    x_min, x_max, y_min, y_max = bounds
    dx = (x_max - x_min) / w
    dy = (y_max - y_min) / h
    col = np.clip(np.floor((xy[:, 0] - x_min) / dx).astype(np.int64), 0, w - 1)
    row = np.clip(np.floor((xy[:, 1] - y_min) / dy).astype(np.int64), 0, h - 1)
    return row * w + col


def normalized_input(cloud: PointCloud) -> np.ndarray:
    """Raw channels with coordinates mapped to [0, 1] by the scene bounds."""
    pts = cloud.points
    out = pts.copy()
    for axis in range(3):
        lo, hi = pts[:, axis].min(), pts[:, axis].max()
        span = max(hi - lo, _MIN_SPAN)
        out[:, axis] = (pts[:, axis] - lo) / span
    return out


def backbone_forward(params: dict[str, Tensor], cloud: PointCloud, grid_h: int, grid_w: int):
    """Per-point MLP, scatter-max onto the grid, one 3x3 conv: (per_point, bev)."""
    if len(cloud) == 0:
        raise ValueError("backbone_forward: empty cloud")
    x = Tensor(normalized_input(cloud))
    h = T.relu(T.add_rowvec(T.matmul(x, params["backbone.point_w1"]), params["backbone.point_b1"]))
    per_point = T.relu(
        T.add_rowvec(T.matmul(h, params["backbone.point_w2"]), params["backbone.point_b2"])
    )
    bounds = grid_bounds(cloud.points[:, :2])
    ids = cell_indices(cloud.points[:, :2], bounds, grid_h, grid_w)
    pooled = T.scatter_max(per_point, ids, grid_h * grid_w)
    grid = T.relu(
        T.conv3x3(pooled, grid_h, grid_w, params["backbone.conv_w"], params["backbone.conv_b"])
    )
    return per_point, BevFeatureMap(grid=grid, h=grid_h, w=grid_w, bounds=bounds)


def bilinear_sample_batch(bev: BevFeatureMap, xy: np.ndarray) -> Tensor:
    """Features at continuous xy positions, (n, c); out-of-bounds clamps to the border."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    x_min, x_max, y_min, y_max = bev.bounds
    dx, dy = bev.cell_size
    # continuous cell-center coordinates
    u = np.clip((xy[:, 0] - x_min) / dx - 0.5, 0.0, bev.w - 1.0)
    v = np.clip((xy[:, 1] - y_min) / dy - 0.5, 0.0, bev.h - 1.0)
    c0 = np.clip(np.floor(u).astype(np.int64), 0, max(bev.w - 2, 0))
    r0 = np.clip(np.floor(v).astype(np.int64), 0, max(bev.h - 2, 0))
    c1 = np.minimum(c0 + 1, bev.w - 1)
    r1 = np.minimum(r0 + 1, bev.h - 1)
    fu = (u - c0)[:, None]
    fv = (v - r0)[:, None]
    corners = (
        (r0 * bev.w + c0, (1.0 - fu) * (1.0 - fv)),
        (r0 * bev.w + c1, fu * (1.0 - fv)),
        (r1 * bev.w + c0, (1.0 - fu) * fv),
        (r1 * bev.w + c1, fu * fv),
    )
    out = None
    for ids, weight in corners:
        term = T.mul_colvec(T.gather_rows(bev.grid, ids), Tensor(weight))
        out = term if out is None else T.add(out, term)
    return out


def bilinear_sample(bev: BevFeatureMap, xy) -> Tensor:
    """Single-position variant of bilinear_sample_batch; returns a (1, c) tensor."""
    return bilinear_sample_batch(bev, np.asarray(xy, dtype=np.float64).reshape(1, 2))
