"""Command-line surface: pretrain, embed, cluster, check-grads, gen-synthetic.

Each subcommand is a thin wrapper over the library; outputs depend only on
(argv, input files, seeds).  Errors print a single ``error: ...`` line to
stderr and exit nonzero.  Set LIDARSSL_LOG=debug for verbose logging.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys

import numpy as np

from .config import ConfigError, desk_config, load_config
from .evaluation import bev_cell_embeddings, cluster_purity, kmeans
from .gradsuite import run_grad_suite
from .pointcloud import FormatError, read_cloud_bin, read_tensor, write_tensor
from .synthetic import SyntheticSceneSpec, generate_dataset, read_labels
from .training import load_checkpoint, train

log = logging.getLogger("lidarssl")


def _setup_logging() -> None:
    level = os.environ.get("LIDARSSL_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(message)s")


def _scene_paths(scene_dir: str) -> list[str]:
    paths = sorted(glob.glob(os.path.join(scene_dir, "*.bin")))
    if not paths:
        raise FileNotFoundError(f"no .bin scenes under {scene_dir}")
    return paths


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    paths = _scene_paths(cfg.scene_dir)
    result = train(cfg, paths, seed=cfg.seed, resume_from=args.resume)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    return 0


def cmd_embed(args) -> int:
    params, _, _, cfg = load_checkpoint(args.checkpoint)
    entries: dict[str, np.ndarray] = {}
    for path in _scene_paths(args.scenes):
        stem = os.path.splitext(os.path.basename(path))[0]
        cloud = read_cloud_bin(path)
        labels_path = os.path.splitext(path)[0] + ".labels.txt"
        if os.path.exists(labels_path):
            _, classes = read_labels(labels_path)
        else:
            classes = np.zeros(len(cloud), dtype=np.int64)
        feats, cell_labels = bev_cell_embeddings(params, cloud, classes, cfg)
        entries[f"{stem}/cell_features"] = feats
        entries[f"{stem}/cell_classes"] = cell_labels.astype(np.float64)
    write_tensor(args.out, entries)
    print(f"embeddings: {args.out} ({len(entries) // 2} scenes)")
    return 0


def cmd_cluster(args) -> int:
    entries = read_tensor(args.embeddings)
    feats = [v for k, v in entries.items() if k.endswith("/cell_features")]
    labels = [v for k, v in entries.items() if k.endswith("/cell_classes")]
    if not feats:
        raise FormatError(f"{args.embeddings}: no cell_features entries")
    features = np.concatenate(feats)
    classes = np.concatenate(labels).astype(np.int64)
    assignments, centroids = kmeans(features, k=args.k, seed=args.seed)
    write_tensor(
        args.out,
        {"assignments": assignments.astype(np.float64), "centroids": centroids},
    )
    text_path = os.path.splitext(args.out)[0] + ".labels.txt"
    with open(text_path, "w", encoding="utf-8") as fh:
        for a, c in zip(assignments, classes):
            fh.write(f"{a} {c}\n")
    purity = cluster_purity(assignments, classes)
    print(f"clusters: {args.out} purity={purity:.4f}")
    return 0


def cmd_check_grads(args) -> int:
    results = run_grad_suite(seeds=range(args.seeds))
    worst = 0.0
    for name, err in results.items():
        print(f"{name}: max_rel_err={err:.3e}")
        worst = max(worst, err)
    ok = worst < 1e-4
    print(f"overall: {'ok' if ok else 'FAILED'} (worst {worst:.3e})")
    return 0 if ok else 1


def cmd_gen_synthetic(args) -> int:
    spec = SyntheticSceneSpec()
    if args.extent is not None:
        spec.extent = args.extent
    paths = generate_dataset(args.out, count=args.count, seed=args.seed, spec=spec)
    print(f"wrote {len(paths)} scenes under {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lidarssl")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run the pre-training loop from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("embed", help="export BEV-cell embeddings for scenes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("cluster", help="k-means over exported embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("check-grads", help="finite-difference audit of every op")
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_check_grads)

    p = sub.add_parser("gen-synthetic", help="write labelled synthetic scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extent", type=float, default=None)
    p.set_defaults(func=cmd_gen_synthetic)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError, FileNotFoundError, ValueError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
