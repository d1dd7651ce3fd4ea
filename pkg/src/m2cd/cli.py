"""Single entry point exposing the toolkit: data generation, speckle
simulation, training, evaluation, inference, ablation grids, and gate
diagnostics.

Exit codes: 0 success, 1 runtime failure (with a one-line machine-parseable
``error <category>: <message>`` on stderr), 2 usage errors.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import datakit, trainer
from .errors import M2cdError, ShapeError
from .metrics import format_table, report_from_kv, report_to_kv
from .network import load_checkpoint
from .speckle import SpeckleConfig, optical_to_sar


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, default=None, help="YAML run config")
    p.add_argument("--max-iterations", type=int, default=None)
    p.add_argument("--val-interval", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--lambda-sd", type=float, default=None, help="self-distillation weight")
    p.add_argument("--sd-reduction", choices=["mean", "sum"], default=None)
    p.add_argument("--looks", type=float, default=None, help="speckle looks for the O2SP bridge")
    p.add_argument("--moe", dest="moe_enabled", action="store_true", default=None)
    p.add_argument("--no-moe", dest="moe_enabled", action="store_false")
    p.add_argument("--o2sp", dest="o2sp_enabled", action="store_true", default=None)
    p.add_argument("--no-o2sp", dest="o2sp_enabled", action="store_false")
    p.add_argument("--log-gates", action="store_true", default=None)


def _add_data_flags(p: argparse.ArgumentParser):
    p.add_argument("--data-root", type=Path, default=None, help="pair-layout dataset root")
    p.add_argument("--synthetic-pairs", type=int, default=None, help="train on generated scenes")
    p.add_argument("--size", type=int, default=128, help="synthetic scene side length")


def _merge_config(args) -> trainer.TrainConfig:
    cfg = trainer.load_config(args.config) if args.config else trainer.TrainConfig()
    direct = [
        "max_iterations",
        "val_interval",
        "batch_size",
        "lr",
        "weight_decay",
        "seed",
        "threshold",
        "moe_enabled",
        "o2sp_enabled",
        "log_gates",
    ]
    updates = {k: getattr(args, k) for k in direct if getattr(args, k, None) is not None}
    if updates:
        cfg = replace(cfg, **updates)
    if getattr(args, "lambda_sd", None) is not None:
        cfg = replace(cfg, loss=replace(cfg.loss, lambda_sd=args.lambda_sd))
    if getattr(args, "sd_reduction", None) is not None:
        cfg = replace(cfg, loss=replace(cfg.loss, sd_reduction=args.sd_reduction))
    if getattr(args, "looks", None) is not None:
        cfg = replace(cfg, speckle=replace(cfg.speckle, looks=args.looks))
    return cfg


def _resolve_datasets(args, config: trainer.TrainConfig, need_test: bool = False):
    if args.data_root is not None:
        train_data = datakit.load_dataset(args.data_root, "train")
        val_data = datakit.load_dataset(args.data_root, "val")
        test_data = datakit.load_dataset(args.data_root, "test") if need_test else None
        return train_data, val_data, test_data
    if args.synthetic_pairs is not None:
        scene = datakit.SyntheticSceneConfig(
            size=(args.size, args.size),
            looks=config.speckle.looks,
            seed=config.seed,
        )
        n = args.synthetic_pairs
        n_val = max(n // 5, 1)
        n_test = max(n // 5, 1) if need_test else 0
        train_data = datakit.SyntheticChangeDataset(scene, n, start_index=0)
        val_data = datakit.SyntheticChangeDataset(scene, n_val, start_index=n)
        test_data = (
            datakit.SyntheticChangeDataset(scene, n_test, start_index=n + n_val)
            if need_test
            else None
        )
        return train_data, val_data, test_data
    raise M2cdError("one of --data-root or --synthetic-pairs is required")


def cmd_gen_data(args) -> int:
    config = datakit.SyntheticSceneConfig(
        size=(args.size, args.size), looks=args.looks, seed=args.seed
    )
    counts = datakit.build_synthetic_dataset(args.out, args.pairs, config)
    print(f"wrote {counts} pairs under {args.out}")
    return 0


def cmd_simulate_speckle(args) -> int:
    config = SpeckleConfig(looks=args.looks, seed=args.seed, luminance_mode=args.mode)
    in_dir, out_dir = Path(args.in_dir), Path(args.out_dir)
    files = sorted(in_dir.glob("*.png"))
    if not files:
        print(f"no .png files under {in_dir}")
        return 0
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for path in files:
        img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        sim = optical_to_sar(img.transpose(2, 0, 1), config, rng=rng)
        out8 = np.round(np.clip(sim, 0, 1) * 255).astype(np.uint8)
        if config.luminance_mode == "luminance_then_replicate":
            Image.fromarray(out8[0], mode="L").save(out_dir / path.name)
        else:
            Image.fromarray(out8.transpose(1, 2, 0), mode="RGB").save(out_dir / path.name)
    print(f"simulated {len(files)} images into {out_dir}")
    return 0


def cmd_train(args) -> int:
    config = _merge_config(args)
    train_data, val_data, _ = _resolve_datasets(args, config)
    state = trainer.train(config, train_data, val_data, run_dir=args.run_dir)
    print(
        f"finished {state.iteration} iterations; best val mIoU "
        f"{state.best_val_miou:.4f} at iteration {state.best_iteration}; "
        f"checkpoint {state.best_checkpoint_path}"
    )
    return 0


def cmd_eval(args) -> int:
    report = trainer.evaluate(
        args.checkpoint,
        datakit.load_dataset(args.data_root, args.split),
        use_tta=args.tta,
        batch_size=args.batch_size,
        threshold=args.threshold,
    )
    table = format_table([(f"{args.split}", report)])
    print(table)
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.txt").write_text(table + "\n")
        (out / "metrics.kv").write_text(report_to_kv(report))
        round_trip = report_from_kv((out / "metrics.kv").read_text())
        assert round_trip == report
    return 0


def _load_image_pair(pre_path: Path, post_path: Path):
    pre = np.asarray(Image.open(pre_path).convert("RGB"), dtype=np.float32) / 255.0
    post = np.asarray(Image.open(post_path).convert("L"), dtype=np.float32) / 255.0
    if pre.shape[:2] != post.shape[:2]:
        raise ShapeError(
            f"pre {pre.shape[:2]} and post {post.shape[:2]} sizes differ "
            f"({pre_path}, {post_path})"
        )
    pre_t = pre.transpose(2, 0, 1)[None]
    post_t = np.repeat(post[None], 3, axis=0)[None]
    import torch

    return torch.from_numpy(pre_t), torch.from_numpy(np.ascontiguousarray(post_t))


def cmd_infer(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    pre, post = _load_image_pair(args.pre, args.post)
    probs = datakit.tta_predict(model, pre, post) if args.tta else None
    if probs is None:
        import torch

        with torch.no_grad():
            probs = model(pre, post)
    probs = probs[0, 0].cpu().numpy()
    mask = (probs > args.threshold).astype(np.uint8) * 255
    args.out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask, mode="L").save(args.out)
    if args.prob is not None:
        np.save(args.prob, probs)
    print(f"wrote {args.out} ({int((mask > 0).sum())} change pixels)")
    return 0


def cmd_ablate(args) -> int:
    config = _merge_config(args)
    train_data, val_data, test_data = _resolve_datasets(args, config, need_test=True)
    rows = trainer.run_ablation_grid(
        config, train_data, val_data, eval_data=test_data, run_root=args.out
    )
    table = format_table([(r["name"], r["report"]) for r in rows])
    print(table)
    if args.out is not None:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "ablation.txt").write_text(table + "\n")
    return 0


def cmd_gate_stats(args) -> int:
    path = Path(args.log)
    if not path.exists():
        raise M2cdError(f"gate log not found: {path}")
    buckets: dict[tuple, list] = {}
    malformed = 0
    with path.open() as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                key = (rec["stage"], rec["path"])
                indices = [int(i) for i in rec["indices"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                malformed += 1
                continue
            buckets.setdefault(key, []).append(indices)
    if malformed:
        print(f"warning: skipped {malformed} malformed line(s)", file=sys.stderr)
    if not buckets:
        print("empty gate log: no decisions recorded")
        return 0
    num_experts = args.num_experts
    if num_experts is None:
        num_experts = 1 + max(i for recs in buckets.values() for idx in recs for i in idx)
    for (stage, path_tag), recs in sorted(buckets.items()):
        counts = np.zeros(num_experts, dtype=np.int64)
        for idx in recs:
            counts[idx] += 1
        freq = counts / len(recs)
        p = counts / counts.sum()
        entropy = float(-(p[p > 0] * np.log(p[p > 0])).sum())
        print(
            f"stage={stage} path={path_tag} decisions={len(recs)} "
            f"freq={np.round(freq, 4).tolist()} entropy={entropy:.4f} "
            f"(uniform={math.log(num_experts):.4f})"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="m2cd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic train/val/test PNG tree")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--looks", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("simulate-speckle", help="speckle a directory of optical images")
    p.add_argument("--looks", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--in", dest="in_dir", type=Path, required=True)
    p.add_argument("--out", dest="out_dir", type=Path, required=True)
    p.add_argument(
        "--mode", choices=["per_channel", "luminance_then_replicate"],
        default="luminance_then_replicate",
    )
    p.set_defaults(func=cmd_simulate_speckle)

    p = sub.add_parser("train", help="train a model")
    _add_config_flags(p)
    _add_data_flags(p)
    p.add_argument("--run-dir", type=Path, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data-root", type=Path, required=True)
    p.add_argument("--split", choices=list(datakit.SPLITS), default="test")
    p.add_argument("--tta", action="store_true")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict a change mask for one image pair")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--pre", type=Path, required=True)
    p.add_argument("--post", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--prob", type=Path, default=None, help="also save the probability map (.npy)")
    p.add_argument("--tta", action="store_true")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="train and compare the {MoE} x {O2SP} grid")
    _add_config_flags(p)
    _add_data_flags(p)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gate-stats", help="summarize a gate-decision log")
    p.add_argument("--log", type=Path, required=True)
    p.add_argument("--num-experts", type=int, default=None)
    p.set_defaults(func=cmd_gate_stats)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except M2cdError as exc:
        print(f"error {exc.category}: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error file-not-found: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
