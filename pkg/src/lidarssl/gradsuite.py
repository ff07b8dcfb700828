"""Finite-difference audit: every differentiable op plus the full objective.

Central differences assume the checked function is differentiable at the
evaluation point, so each random instance is screened for kink margins
(relu pre-activations and max-pool runner-up gaps).  Instances whose
smallest margin falls within a few dozen step sizes of a kink are
regenerated with a salted seed; the salt search is deterministic, so the
suite's verdict is reproducible.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import masked_attention_reconstruct, reconstruction_loss, refinement_loss_batch
from .augment import make_view_pair
from .bev import BevFeatureMap, bilinear_sample_batch
from .config import desk_config
from .encoders import forward_scene, init_params
from .geometry import build_regions, fit_ground_plane
from .losses import LossWeights, nt_xent, proposal_loss, proposal_to_patch_loss, total_loss
from .rng import derive_seed, make_rng
from .synthetic import SyntheticSceneSpec, generate_synthetic_scene
from .tensor import Tensor, grad_check, grad_check_params, margin_tracking

H_STEP = 1e-5
_MARGIN_MIN = 5e-5  # regenerate instances closer than this to a relu/argmax switch


def _away_from_zero(rng, shape, low=0.25, high=1.5):
    """Values with |x| in [low, high]: safe inputs for kinked ops."""
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def op_grad_checks(seed: int) -> dict[str, float]:
    """Max relative FD error per op for one seed's random instances."""
    rng = make_rng(seed, "op-suite")
    n, m = 5, 4
    a = Tensor(rng.normal(size=(n, m)), requires_grad=True)
    b = Tensor(rng.normal(size=(n, m)))
    col = Tensor(rng.normal(size=(n, 1)) + 2.0)
    row = Tensor(rng.normal(size=(1, m)))
    out: dict[str, float] = {}

    def check(name, f, x):
        err = grad_check(f, x, h=H_STEP)
        out[name] = max(out.get(name, 0.0), err)

    check("add", lambda x: T.sum_all(T.add(x, b)), a)
    check("sub", lambda x: T.sum_all(T.sub(x, b)), a)
    check("mul", lambda x: T.mean_all(T.mul(x, b)), a)
    check("scale", lambda x: T.sum_all(T.scale(x, -1.7)), a)
    check("add_const", lambda x: T.sum_all(T.add_const(x, 3.0)), a)
    check("add_rowvec", lambda x: T.sum_all(T.add_rowvec(a, x)), Tensor(row.values.copy(), True))
    check("add_rowvec", lambda x: T.sum_all(T.add_rowvec(x, row)), a)
    check("sub_colvec", lambda x: T.sum_all(T.sub_colvec(x, col)), a)
    check("sub_colvec", lambda x: T.sum_all(T.sub_colvec(a, x)), Tensor(col.values.copy(), True))
    check("mul_colvec", lambda x: T.sum_all(T.mul_colvec(x, col)), a)
    check("mul_colvec", lambda x: T.sum_all(T.mul_colvec(a, x)), Tensor(col.values.copy(), True))
    check("relu", lambda x: T.sum_all(T.relu(x)), Tensor(_away_from_zero(rng, (n, m)), True))
    check("tanh", lambda x: T.sum_all(T.tanh(x)), a)
    check("exp", lambda x: T.sum_all(T.exp(x)), a)
    check("log", lambda x: T.sum_all(T.log(x)), Tensor(rng.uniform(0.3, 2.0, size=(n, m)), True))

    w = Tensor(rng.normal(size=(m, 3)), requires_grad=True)
    check("matmul", lambda x: T.sum_all(T.matmul(x, Tensor(w.values))), a)
    check("matmul", lambda x: T.sum_all(T.matmul(Tensor(a.values), x)), w)
    check("transpose", lambda x: T.sum_all(T.matmul(T.transpose(x), Tensor(col.values))), a)
    mix_nm = Tensor(rng.normal(size=(m, n)))
    check("reshape", lambda x: T.sum_all(T.mul(T.reshape(x, (m, n)), mix_nm)), a)
    check("concat_axis0", lambda x: T.mean_all(T.concat([x, b], axis=0)), a)
    check("concat_axis1", lambda x: T.mean_all(T.concat([x, b], axis=1)), a)
    idx = rng.integers(0, n, size=8)
    check("gather_rows", lambda x: T.mean_all(T.gather_rows(x, idx)), a)
    check("sum_all", lambda x: T.sum_all(x), a)
    mix_col = Tensor(rng.normal(size=(n, 1)))
    check("sum_rows", lambda x: T.sum_all(T.mul(T.sum_rows(x), mix_col)), a)
    check("mean_all", lambda x: T.mean_all(x), a)

    spread = Tensor(_spread_rows(rng, n, m), requires_grad=True)
    check("rowmax", lambda x: T.sum_all(T.rowmax(x)), spread)
    spread2 = Tensor(_spread_rows(rng, n, m).T.copy(), requires_grad=True)
    check("colmax", lambda x: T.sum_all(T.colmax(x)), spread2)
    ids = np.sort(rng.integers(0, 3, size=n))
    check("scatter_max", lambda x: T.sum_all(T.scatter_max(x, ids, 4)), spread)

    check("l2_normalize", lambda x: T.mean_all(T.l2_normalize(x)), a)
    mix_nmn = Tensor(rng.normal(size=(n, m)))
    check("softmax_row", lambda x: T.mean_all(T.mul(T.softmax_row(x), mix_nmn)), a)

    h, wgrid, cin, cout = 4, 5, 3, 2
    grid = Tensor(rng.normal(size=(h * wgrid, cin)), requires_grad=True)
    cw = Tensor(rng.normal(size=(9 * cin, cout)), requires_grad=True)
    cb = Tensor(rng.normal(size=(1, cout)), requires_grad=True)
    check("conv3x3", lambda x: T.sum_all(T.conv3x3(x, h, wgrid, Tensor(cw.values), Tensor(cb.values))), grid)
    check("conv3x3", lambda x: T.sum_all(T.conv3x3(Tensor(grid.values), h, wgrid, x, Tensor(cb.values))), cw)
    check("conv3x3", lambda x: T.sum_all(T.conv3x3(Tensor(grid.values), h, wgrid, Tensor(cw.values), x)), cb)

    bev_xy = rng.uniform(-1.0, 1.0, size=(6, 2))
    def bilinear_loss(x):
        fmap = BevFeatureMap(grid=x, h=h, w=wgrid, bounds=(-1.2, 1.2, -1.2, 1.2))
        return T.sum_all(bilinear_sample_batch(fmap, bev_xy))
    check("bilinear_sample", bilinear_loss, Tensor(grid.values.copy(), True))

    # attention block and the contrastive losses
    c = 6
    attn = {name: Tensor(rng.normal(size=(c, c)) * 0.5, requires_grad=True)
            for name in ("attn.wq", "attn.wk", "attn.wv", "attn.wo")}
    tokens = Tensor(rng.normal(size=(4, c)), requires_grad=True)
    pos = Tensor(rng.normal(size=(4, c)), requires_grad=True)

    def attn_loss(x):
        u_hat = masked_attention_reconstruct(attn, x, Tensor(pos.values), 1)
        return reconstruction_loss(T.gather_rows(x, [1]), u_hat)

    check("masked_attention", attn_loss, tokens)
    check(
        "masked_attention",
        lambda x: reconstruction_loss(
            T.gather_rows(Tensor(tokens.values), [1]),
            masked_attention_reconstruct(
                {**{k: Tensor(v.values) for k, v in attn.items()}, "attn.wq": x},
                Tensor(tokens.values), Tensor(pos.values), 1,
            ),
        ),
        Tensor(attn["attn.wq"].values.copy(), True),
    )
    rec_other = Tensor(rng.normal(size=(1, c)))
    check(
        "reconstruction_loss",
        lambda x: reconstruction_loss(x, rec_other),
        Tensor(rng.normal(size=(1, c)), True),
    )

    emb = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    check("nt_xent", lambda x: nt_xent(x, 0, 1, 0.5), emb)
    check("proposal_loss", lambda x: proposal_loss(x, 0.5), emb)
    other = Tensor(rng.normal(size=(6, 4)))
    check("p2p_loss_mixed", lambda x: proposal_to_patch_loss(x, other, 0.5, "mixed"), emb)
    check("p2p_loss_cross", lambda x: proposal_to_patch_loss(x, other, 0.5, "cross"), emb)
    return out


def _spread_rows(rng, n: int, m: int) -> np.ndarray:
    """Random rows whose top-2 entries are well separated (no argmax flips)."""
    vals = rng.normal(size=(n, m))
    vals[np.arange(n), rng.integers(0, m, size=n)] += 2.0
    return vals


# ---------------------------------------------------------------------------
# end-to-end toy pipeline
# ---------------------------------------------------------------------------


def _toy_config():
    cfg = desk_config()
    cfg.geometry.n_proposals = 2
    cfg.geometry.proposal_max_points = 8
    cfg.geometry.patch_max_points = 4
    cfg.model.feature_dim = 6
    cfg.model.projection_dim = 3
    cfg.model.bev_mid_channels = 4
    cfg.model.backbone_hidden = 5
    cfg.model.grid_h = 6
    cfg.model.grid_w = 6
    return cfg


_GRAD_FLOOR = 1e-6  # central differences at h=1e-5 cannot resolve smaller live grads


def build_toy_setup(seed: int, max_attempts: int = 200):
    """A 2-proposal scene and its full-objective closure, screened for FD validity.

    Returns (params, loss_fn).  The check verifies the differentiation
    engine, so the evaluation point is chosen for measurability: unit
    temperature and loss weights keep the loss O(1) (less FD rounding
    noise), the attention weights are scaled up so their gradients clear
    the noise floor, and salted retries skip instances that sit on a relu
    or argmax kink or whose smallest live gradient is unresolvable.
    """
    cfg = _toy_config()
    spec = SyntheticSceneSpec(
        extent=5.0, ground_points=50, instance_count_range=(2, 2),
        instance_points_range=(40, 60),
    )
    weights = LossWeights(lambda_rec=1.0, temperature=1.0)
    for attempt in range(max_attempts):
        salt = derive_seed(seed, "toy", attempt)
        scene = generate_synthetic_scene(salt, spec)
        plane = fit_ground_plane(scene.cloud, seed=derive_seed(salt, "plane"))
        pair = make_view_pair(scene.cloud, cfg.augment, derive_seed(salt, "aug"))
        g = cfg.geometry
        regions = build_regions(
            pair, plane, g.n_proposals, g.proposal_radius, g.proposal_max_points,
            g.num_patches, g.patch_offset, g.patch_radius, g.patch_max_points,
            derive_seed(salt, "regions"), margin=g.ground_margin,
        )
        if regions.n_pairs < 2:
            continue
        params = init_params(
            cfg.model.feature_dim, cfg.model.projection_dim,
            cfg.model.bev_mid_channels, cfg.model.backbone_hidden,
            seed=derive_seed(salt, "params"),
        )
        for name in ("attn.wq", "attn.wk", "attn.wv", "attn.wo"):
            params[name].values = params[name].values * 4.0
        mask_seed = derive_seed(salt, "mask")

        def loss_fn(params=params, pair=pair, regions=regions, mask_seed=mask_seed):
            emb = forward_scene(params, pair, regions, cfg.model.grid_h, cfg.model.grid_w)
            lp = proposal_loss(emb.proj_prop, weights.temperature)
            lp2p = proposal_to_patch_loss(emb.proj_prop, emb.proj_patch, weights.temperature)
            lrec = refinement_loss_batch(params, emb, mask_seed)
            return total_loss(lp, lp2p, lrec, weights)

        with margin_tracking() as margins:
            loss = loss_fn()
        if margins and min(v for _, v in margins) < _MARGIN_MIN:
            continue
        T.backward(loss)
        live = [np.abs(p.grad[p.grad != 0.0]) for p in params.values()
                if p.grad is not None and np.any(p.grad != 0.0)]
        for p in params.values():
            p.grad = None
        if live and min(float(g.min()) for g in live) < _GRAD_FLOOR:
            continue
        return params, loss_fn
    raise RuntimeError(f"no FD-checkable toy instance found for seed {seed}")


def end_to_end_grad_check(seed: int) -> float:
    params, loss_fn = build_toy_setup(seed)
    err, _name = grad_check_params(lambda: loss_fn(), params, h=H_STEP)
    return err


def run_grad_suite(seeds=range(10)) -> dict[str, float]:
    """Max relative FD error per op, over all seeds, plus the end-to-end check."""
    results: dict[str, float] = {}
    for seed in seeds:
        for name, err in op_grad_checks(seed).items():
            results[name] = max(results.get(name, 0.0), err)
    for seed in seeds:
        err = end_to_end_grad_check(seed)
        results["end_to_end"] = max(results.get("end_to_end", 0.0), err)
    return results
