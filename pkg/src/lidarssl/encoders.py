"""Proposal and patch encoders, positional encoding, projection heads.

Both point encoders are shared per-point MLPs followed by a column max
pool, so they are permutation invariant by construction.  ``forward_scene``
runs them batched: all proposal points of a view go through one matrix
multiply and a segment max, which is numerically identical to encoding
each proposal on its own.

Ordering contract of the merged projections: row 2k of ``proj_prop`` is
pair slot k seen from view 1 and row 2k+1 the same slot from view 2;
row k of ``proj_patch`` is the aggregated-patch counterpart of
``proj_prop`` row k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .augment import SceneViewPair
from .bev import backbone_forward, bilinear_sample_batch
from .geometry import RegionSet
from .rng import make_rng
from .tensor import Tensor


def _glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(
    feature_dim: int,
    projection_dim: int,
    bev_mid_channels: int,
    backbone_hidden: int,
    seed: int,
    in_channels: int = 4,
) -> dict[str, Tensor]:
    """All trainable tensors, in a fixed insertion order, Glorot-uniform seeded."""
    c, z, mid, hid = feature_dim, projection_dim, bev_mid_channels, backbone_hidden
    shapes = [
        ("backbone.point_w1", in_channels, hid),
        ("backbone.point_b1", 1, hid),
        ("backbone.point_w2", hid, mid),
        ("backbone.point_b2", 1, mid),
        ("backbone.conv_w", 9 * mid, c),
        ("backbone.conv_b", 1, c),
        ("proposal.enc_w1", c + 3, c),
        ("proposal.enc_b1", 1, c),
        ("proposal.enc_w2", c, c),
        ("proposal.enc_b2", 1, c),
        ("patch.enc_w1", c + 3, c),
        ("patch.enc_b1", 1, c),
        ("patch.enc_w2", c, c),
        ("patch.enc_b2", 1, c),
        ("posenc.w1", 3, c),
        ("posenc.b1", 1, c),
        ("posenc.w2", c, c),
        ("posenc.b2", 1, c),
        ("proposal.proj_w1", c, c),
        ("proposal.proj_b1", 1, c),
        ("proposal.proj_w2", c, z),
        ("proposal.proj_b2", 1, z),
        ("patch.proj_w1", c, c),
        ("patch.proj_b1", 1, c),
        ("patch.proj_w2", c, z),
        ("patch.proj_b2", 1, z),
        ("attn.wq", c, c),
        ("attn.wk", c, c),
        ("attn.wv", c, c),
        ("attn.wo", c, c),
    ]
    params: dict[str, Tensor] = {}
    for name, rows, cols in shapes:
        rng = make_rng(seed, "init", name)
        if rows == 1 and ("_b" in name.rsplit(".", 1)[-1]):
            # small nonzero bias init keeps relu inputs off the exact-zero kink
            # (empty grid cells are exact zeros, so a zero bias would pin them there)
            values = rng.uniform(-0.05, 0.05, size=(rows, cols))
        else:
            values = _glorot(rng, rows, cols)
        params[name] = Tensor(values, requires_grad=True)
    return params


def _pointnet(params: dict[str, Tensor], prefix: str, feats: Tensor) -> Tensor:
    h = T.relu(T.add_rowvec(T.matmul(feats, params[f"{prefix}.enc_w1"]), params[f"{prefix}.enc_b1"]))
    return T.relu(T.add_rowvec(T.matmul(h, params[f"{prefix}.enc_w2"]), params[f"{prefix}.enc_b2"]))


def encode_proposal(params: dict[str, Tensor], point_features: Tensor) -> Tensor:
    """k x (C+3) per-point features -> 1 x C embedding (shared MLP + max pool)."""
    return T.colmax(_pointnet(params, "proposal", point_features))


def encode_patch(params: dict[str, Tensor], point_features: Tensor) -> Tensor:
    return T.colmax(_pointnet(params, "patch", point_features))


def positional_encode(params: dict[str, Tensor], rel_centers) -> Tensor:
    """(n, 3) patch origins relative to their proposal center -> (n, C)."""
    x = rel_centers if isinstance(rel_centers, Tensor) else Tensor(np.asarray(rel_centers).reshape(-1, 3))
    h = T.relu(T.add_rowvec(T.matmul(x, params["posenc.w1"]), params["posenc.b1"]))
    return T.add_rowvec(T.matmul(h, params["posenc.w2"]), params["posenc.b2"])


def project(params: dict[str, Tensor], which: str, x: Tensor) -> Tensor:
    """One-hidden-layer projector (C -> C -> z); ``which`` is proposal or patch."""
    if which not in ("proposal", "patch"):
        raise ValueError(f"unknown projector {which!r}")
    h = T.relu(T.add_rowvec(T.matmul(x, params[f"{which}.proj_w1"]), params[f"{which}.proj_b1"]))
    return T.add_rowvec(T.matmul(h, params[f"{which}.proj_w2"]), params[f"{which}.proj_b2"])


def aggregate_patches(patch_embeddings: Tensor) -> Tensor:
    """m x C patch embeddings of one proposal -> 1 x C (elementwise max)."""
    return T.colmax(patch_embeddings)


@dataclass
class EmbeddingSet:
    """Everything the losses consume for one scene-view pair."""

    n_pairs: int
    m: int
    prop_embed_1: Tensor  # n_pairs x C
    prop_embed_2: Tensor
    patch_embed_1: Tensor | None  # (n_pairs*m) x C, slot-major
    patch_embed_2: Tensor | None
    pos_1: Tensor | None  # positional encodings, same layout as patch embeddings
    pos_2: Tensor | None
    proj_prop: Tensor  # 2*n_pairs x z, views interleaved per pair slot
    proj_patch: Tensor | None  # 2*n_pairs x z, row k matches proj_prop row k


def _interleave(a: Tensor, b: Tensor) -> Tensor:
    n = a.shape[0]
    perm = np.empty(2 * n, dtype=np.int64)
    perm[0::2] = np.arange(n)
    perm[1::2] = np.arange(n) + n
    return T.gather_rows(T.concat([a, b], axis=0), perm)


def _encode_view(params, view_cloud, proposals, patches, grid_h, grid_w):
    _, bev = backbone_forward(params, view_cloud, grid_h, grid_w)
    n_pairs = len(proposals)

    member_xyz = np.concatenate([view_cloud.xyz[p.member_view_indices] for p in proposals])
    seg = np.repeat(
        np.arange(n_pairs, dtype=np.int64),
        [len(p.member_view_indices) for p in proposals],
    )
    centers = np.concatenate(
        [np.tile(p.center, (len(p.member_view_indices), 1)) for p in proposals]
    )
    feats = T.concat(
        [bilinear_sample_batch(bev, member_xyz[:, :2]), Tensor(member_xyz - centers)], axis=1
    )
    prop_embed = T.scatter_max(_pointnet(params, "proposal", feats), seg, n_pairs)

    patch_embed = pos = None
    if patches and len(patches[0]):
        m = len(patches[0])
        flat = [p for group in patches for p in group]
        pxyz = np.concatenate([view_cloud.xyz[p.member_view_indices] for p in flat])
        pseg = np.repeat(
            np.arange(n_pairs * m, dtype=np.int64),
            [len(p.member_view_indices) for p in flat],
        )
        origins = np.concatenate(
            [np.tile(p.keypoint, (len(p.member_view_indices), 1)) for p in flat]
        )
        pfeats = T.concat(
            [bilinear_sample_batch(bev, pxyz[:, :2]), Tensor(pxyz - origins)], axis=1
        )
        patch_embed = T.scatter_max(_pointnet(params, "patch", pfeats), pseg, n_pairs * m)
        pos = positional_encode(params, np.stack([p.rel_center for p in flat]))
    return prop_embed, patch_embed, pos


def forward_scene(
    params: dict[str, Tensor],
    pair: SceneViewPair,
    regions: RegionSet,
    grid_h: int,
    grid_w: int,
) -> EmbeddingSet:
    """Backbone per view, region encoders, projectors; assembles the EmbeddingSet."""
    if regions.n_pairs == 0:
        raise ValueError("forward_scene: scene has no proposal pairs")
    p1, pe1, pos1 = _encode_view(
        params, pair.s1, [a for a, _ in regions.pairs], regions.patches1, grid_h, grid_w
    )
    p2, pe2, pos2 = _encode_view(
        params, pair.s2, [b for _, b in regions.pairs], regions.patches2, grid_h, grid_w
    )
    proj_prop = project(params, "proposal", _interleave(p1, p2))
    proj_patch = None
    m = len(regions.patches1[0]) if regions.patches1 else 0
    if pe1 is not None and pe2 is not None:
        seg = np.repeat(np.arange(regions.n_pairs, dtype=np.int64), m)
        agg1 = T.scatter_max(pe1, seg, regions.n_pairs)
        agg2 = T.scatter_max(pe2, seg, regions.n_pairs)
        proj_patch = project(params, "patch", _interleave(agg1, agg2))
    return EmbeddingSet(
        n_pairs=regions.n_pairs,
        m=m,
        prop_embed_1=p1,
        prop_embed_2=p2,
        patch_embed_1=pe1,
        patch_embed_2=pe2,
        pos_1=pos1,
        pos_2=pos2,
        proj_prop=proj_prop,
        proj_patch=proj_patch,
    )
