"""Optimization loop: Adam, cosine learning-rate schedule, checkpoints, metrics.

Training is a pure function of (config, scene files, seed).  Batch
composition, augmentation, region extraction and mask choices all derive
their randomness from (seed, step, slot) keys rather than sequential
generator state, so resuming from a checkpoint replays the uninterrupted
trajectory bit for bit.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import refinement_loss_batch
from .augment import make_view_pair
from .config import RunConfig, config_hash, config_to_dict, config_from_dict
from .encoders import forward_scene, init_params
from .geometry import build_regions, fit_ground_plane
from .losses import proposal_loss, proposal_to_patch_loss, total_loss
from .pointcloud import read_cloud_bin, read_tensor, write_tensor
from .rng import derive_seed, make_rng
from .tensor import Tensor


@dataclass
class Schedule:
    max_lr: float
    total_steps: int
    warmup_steps: int

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if self.max_lr <= 0:
            raise ValueError("max_lr must be positive")


def lr_at(schedule: Schedule, step: int) -> float:
    """Linear warmup to max_lr, then cosine decay to zero at total_steps."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.max_lr * step / schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.max_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float
) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.values)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.values)
            v = np.zeros_like(p.values)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        p.values = p.values - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: dict[str, Tensor], state: AdamState, step: int, cfg: RunConfig) -> None:
    """Tensor container next to a JSON manifest carrying step + config."""
    entries: dict[str, np.ndarray] = {}
    for name, p in params.items():
        entries[f"param/{name}"] = p.values
    for name in params:
        if name in state.m:
            entries[f"adam.m/{name}"] = state.m[name]
            entries[f"adam.v/{name}"] = state.v[name]
    write_tensor(path, entries)
    manifest = {
        "step": step,
        "adam_step": state.step,
        "config_hash": config_hash(cfg),
        "config": config_to_dict(cfg),
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path, expected_cfg: RunConfig | None = None):
    """Returns (params, AdamState, step, RunConfig); validates hash and shapes."""
    with open(str(path) + ".json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = config_from_dict(manifest["config"])
    if expected_cfg is not None and config_hash(expected_cfg) != manifest["config_hash"]:
        raise ValueError(
            "checkpoint config hash mismatch: the checkpoint was written with "
            "different hyperparameters; refusing to resume"
        )
    entries = read_tensor(path)
    template = init_params(
        cfg.model.feature_dim,
        cfg.model.projection_dim,
        cfg.model.bev_mid_channels,
        cfg.model.backbone_hidden,
        seed=0,
    )
    params: dict[str, Tensor] = {}
    for name, t in template.items():
        arr = entries.get(f"param/{name}")
        if arr is None:
            raise ValueError(f"checkpoint missing parameter {name!r}")
        if arr.shape != t.shape:
            raise ValueError(f"checkpoint shape mismatch for {name!r}: {arr.shape} vs {t.shape}")
        params[name] = Tensor(arr, requires_grad=True)
    state = AdamState(step=manifest["adam_step"])
    for name in params:
        if f"adam.m/{name}" in entries:
            state.m[name] = entries[f"adam.m/{name}"]
            state.v[name] = entries[f"adam.v/{name}"]
    return params, state, int(manifest["step"]), cfg


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_path: str
    metrics_path: str
    params: dict[str, Tensor]
    steps_run: int


def _batch_indices(seed: int, step: int, batch: int, n_scenes: int) -> list[int]:
    """Scene indices for one step: epoch-shuffled, cycling, stateless."""
    out = []
    for i in range(batch):
        pos = step * batch + i
        epoch = pos // n_scenes
        perm = make_rng(seed, "epoch-order", epoch).permutation(n_scenes)
        out.append(int(perm[pos % n_scenes]))
    return out


def scene_losses(params, cloud, plane, cfg: RunConfig, seed: int):
    """(L_p, L_p2p, L_rec) tensors for one scene, or None if it has no proposals."""
    pair = make_view_pair(cloud, cfg.augment, derive_seed(seed, "aug"))
    g = cfg.geometry
    regions = build_regions(
        pair,
        plane,
        g.n_proposals,
        g.proposal_radius,
        g.proposal_max_points,
        g.num_patches,
        g.patch_offset,
        g.patch_radius,
        g.patch_max_points,
        derive_seed(seed, "regions"),
        margin=g.ground_margin,
    )
    if regions.n_pairs == 0:
        return None
    emb = forward_scene(params, pair, regions, cfg.model.grid_h, cfg.model.grid_w)
    tau = cfg.loss.temperature
    loss_p = proposal_loss(emb.proj_prop, tau)
    loss_p2p = loss_rec = None
    if emb.proj_patch is not None and cfg.loss.lambda_p2p > 0:
        loss_p2p = proposal_to_patch_loss(emb.proj_prop, emb.proj_patch, tau, cfg.p2p_negative_pool)
    if emb.m >= 2 and cfg.loss.lambda_rec > 0:
        loss_rec = refinement_loss_batch(params, emb, derive_seed(seed, "mask"))
    return loss_p, loss_p2p, loss_rec


def train(
    cfg: RunConfig,
    scene_paths: list,
    seed: int,
    resume_from=None,
    stop_step: int | None = None,
) -> TrainResult:
    """Run the optimization loop; deterministic given (cfg, scenes, seed)."""
    if not scene_paths:
        raise ValueError("train needs at least one scene")
    os.makedirs(cfg.out_dir, exist_ok=True)
    metrics_path = os.path.join(cfg.out_dir, "metrics.jsonl")

    if resume_from is not None:
        params, state, start_step, _ = load_checkpoint(resume_from, expected_cfg=cfg)
        mode = "a"
    else:
        params = init_params(
            cfg.model.feature_dim,
            cfg.model.projection_dim,
            cfg.model.bev_mid_channels,
            cfg.model.backbone_hidden,
            seed=derive_seed(seed, "init"),
        )
        state = AdamState()
        start_step = 0
        mode = "w"

    warmup = min(int(round(cfg.train.warmup_frac * cfg.train.steps)), cfg.train.steps - 1)
    schedule = Schedule(
        max_lr=cfg.train.max_lr,
        total_steps=cfg.train.steps,
        warmup_steps=max(0, warmup),
    )
    clouds: dict[int, object] = {}
    planes: dict[int, object] = {}
    end_step = cfg.train.steps if stop_step is None else min(stop_step, cfg.train.steps)
    ckpt_path = os.path.join(cfg.out_dir, "checkpoint.pctn")

    with open(metrics_path, mode, encoding="utf-8") as metrics:
        for step in range(start_step, end_step):
            lr = lr_at(schedule, step)
            terms = {"L_p": [], "L_p2p": [], "L_rec": []}
            scene_totals = []
            skipped = 0
            for idx in _batch_indices(seed, step, cfg.train.batch_scenes, len(scene_paths)):
                if idx not in clouds:
                    clouds[idx] = read_cloud_bin(scene_paths[idx])
                    planes[idx] = fit_ground_plane(
                        clouds[idx],
                        iters=cfg.geometry.ransac_iters,
                        inlier_tol=cfg.geometry.ransac_inlier_tol,
                        seed=derive_seed(seed, "plane", idx),
                    )
                losses = scene_losses(
                    params, clouds[idx], planes[idx], cfg, derive_seed(seed, "scene", step, idx)
                )
                if losses is None:
                    skipped += 1
                    continue
                loss_p, loss_p2p, loss_rec = losses
                terms["L_p"].append(loss_p.item())
                terms["L_p2p"].append(loss_p2p.item() if loss_p2p is not None else 0.0)
                terms["L_rec"].append(loss_rec.item() if loss_rec is not None else 0.0)
                scene_totals.append(total_loss(loss_p, loss_p2p, loss_rec, cfg.loss))

            record = {"step": step, "lr": lr, "scenes_skipped": skipped}
            if scene_totals:
                batch_total = T.scale(scene_totals[0], 1.0 / len(scene_totals))
                for extra in scene_totals[1:]:
                    batch_total = T.add(batch_total, T.scale(extra, 1.0 / len(scene_totals)))
                T.backward(batch_total)
                grads = {}
                for name, p in params.items():
                    if p.grad is not None:
                        grads[name] = p.grad
                    p.grad = None
                adam_step(params, grads, state, lr)
                record["L_p"] = float(np.mean(terms["L_p"]))
                record["L_p2p"] = float(np.mean(terms["L_p2p"]))
                record["L_rec"] = float(np.mean(terms["L_rec"]))
                record["total"] = batch_total.item()
            else:
                record["L_p"] = record["L_p2p"] = record["L_rec"] = record["total"] = None
            metrics.write(json.dumps(record) + "\n")
            if cfg.train.debug_checks:
                for name, p in params.items():
                    if not np.all(np.isfinite(p.values)):
                        raise FloatingPointError(f"parameter {name!r} became non-finite at step {step}")
            if (step + 1) % cfg.train.checkpoint_every == 0 or step + 1 == end_step:
                save_checkpoint(ckpt_path, params, state, step + 1, cfg)

    return TrainResult(
        checkpoint_path=ckpt_path,
        metrics_path=metrics_path,
        params=params,
        steps_run=end_step - start_step,
    )
