"""Command-line entry point: inspect, gradcheck, train, eval.

Exit codes: 0 success, 1 validation failure, 2 numerical failure.  Every
subcommand honors --seed and is bit-reproducible single-threaded; train
and eval echo their resolved configuration into the output directory.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .attention import LkaConfig, count_params_flops, decompose_large_kernel, eca_kernel_size
from .evaluation import evaluate, evaluate_features, load_manifest
from .model import ModelConfig, build_model, extract_features, load_checkpoint, save_checkpoint
from .tensor import NumericsError
from .training import (
    SyntheticDatasetSpec,
    TrainConfig,
    fit,
    split_query_gallery,
    synth_generate,
    write_log,
)
from .verify import TOLERANCE, run_gradcheck

# test hook: name a gradcheck block whose analytic gradient gets corrupted
_CORRUPT_ENV = "LKAREID_CORRUPT_GRAD"


def cmd_inspect(args):
    dec = decompose_large_kernel(args.K, args.d, channels=args.C)
    k1d = eca_kernel_size(args.C, args.gamma, args.b)
    lka_cfg = LkaConfig(args.C, args.K, args.d)
    _, flops = count_params_flops(lka_cfg, (1, args.C, args.H, args.W))
    payload = {
        "kernel": args.K,
        "dilation": dec.dilation,
        "channels": args.C,
        "dw_kernel": dec.dw_kernel,
        "dd_kernel": dec.dd_kernel,
        "receptive_field": dec.receptive_field,
        "params_decomposed": dec.params_decomposed,
        "params_depthwise_full": dec.params_depthwise_full,
        "params_full_conv": dec.params_full_conv,
        "lka_block_flops": flops,
        "conv1d_kernel": k1d,
    }
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
        return 0
    print(f"K={args.K} d={args.d} C={args.C}  ({args.H}x{args.W} input)")
    print(f"  depthwise kernel        {dec.dw_kernel}x{dec.dw_kernel}")
    print(f"  dilated depthwise       {dec.dd_kernel}x{dec.dd_kernel}, dilation {dec.dilation}")
    print(f"  receptive field         {dec.receptive_field}")
    print(f"  params decomposed       {dec.params_decomposed:,}")
    print(f"  params depthwise+1x1    {dec.params_depthwise_full:,}")
    print(f"  params full KxK conv    {dec.params_full_conv:,}")
    print(f"  LKA block FLOPs         {flops:,}")
    print(f"  conv1d kernel for C     {k1d}")
    return 0


def cmd_gradcheck(args):
    results = run_gradcheck(args.scope, args.seed, corrupt=os.environ.get(_CORRUPT_ENV))
    worst_block = max(results, key=results.get)
    ok = results[worst_block] <= TOLERANCE
    for name in sorted(results):
        status = "pass" if results[name] <= TOLERANCE else "FAIL"
        print(f"{name:14s} worst rel. error {results[name]:.3e}  {status}")
    if args.json:
        print(json.dumps({"results": results, "pass": ok}, sort_keys=True))
    if not ok:
        print(f"gradcheck FAILED in block {worst_block}", file=sys.stderr)
        return 2
    return 0


_TRAIN_DEFAULTS = {
    "seed": 0,
    "steps": 400,
    "lr": 0.01,
    "momentum": 0.9,
    "optimizer": "sgd",
    "grad_clip_norm": 5.0,
    "margin": 0.3,
    "label_smoothing": 0.0,
    "p": 4,
    "k": 4,
    "num_identities": 16,
    "images_per_identity": 8,
    "num_cameras": 4,
    "image_size": 48,
    "stem_widths": "16,32,64",
    "feature_dim": 128,
    "blocks_per_branch": 3,
    "lka_kernel": 7,
    "lka_dilation": 2,
    "hca_local_grid": 5,
    "attention_enabled": True,
    "metadata_embeddings_enabled": False,
}


def _coerce(key, value):
    default = _TRAIN_DEFAULTS[key]
    if isinstance(default, bool):
        if str(value).lower() in ("1", "true", "yes"):
            return True
        if str(value).lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"config key {key}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


def resolve_train_config(config_path=None, overrides=()):
    """Flat key=value config layer plus CLI overrides; unknown keys rejected."""
    resolved = dict(_TRAIN_DEFAULTS)

    def apply(key, value, where):
        if key not in _TRAIN_DEFAULTS:
            raise ValueError(f"{where}: unknown config key {key!r}")
        resolved[key] = _coerce(key, value)

    if config_path:
        for lineno, line in enumerate(Path(config_path).read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{config_path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            apply(key.strip(), value.strip(), f"{config_path}:{lineno}")
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"--set {item!r}: expected key=value")
        key, value = item.split("=", 1)
        apply(key.strip(), value.strip(), "--set")
    return resolved


def _configs_from_resolved(resolved):
    model_cfg = ModelConfig(
        num_identities=resolved["num_identities"],
        stem_widths=tuple(int(v) for v in str(resolved["stem_widths"]).split(",")),
        feature_dim=resolved["feature_dim"],
        blocks_per_branch=resolved["blocks_per_branch"],
        lka_kernel=resolved["lka_kernel"],
        lka_dilation=resolved["lka_dilation"],
        hca_local_grid=resolved["hca_local_grid"],
        num_cameras=resolved["num_cameras"],
        attention_enabled=resolved["attention_enabled"],
        metadata_embeddings_enabled=resolved["metadata_embeddings_enabled"],
    )
    train_cfg = TrainConfig(
        identities_per_batch=resolved["p"],
        instances_per_identity=resolved["k"],
        margin=resolved["margin"],
        lr=resolved["lr"],
        momentum=resolved["momentum"],
        optimizer=resolved["optimizer"],
        grad_clip_norm=resolved["grad_clip_norm"],
        steps=resolved["steps"],
        seed=resolved["seed"],
        label_smoothing=resolved["label_smoothing"],
    )
    data_spec = SyntheticDatasetSpec(
        num_identities=resolved["num_identities"],
        images_per_identity=resolved["images_per_identity"],
        num_cameras=resolved["num_cameras"],
        image_size=resolved["image_size"],
        seed=resolved["seed"],
    )
    return model_cfg, train_cfg, data_spec


def cmd_train(args):
    resolved = resolve_train_config(args.config, args.set or ())
    if args.seed is not None:
        resolved["seed"] = args.seed
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")

    model_cfg, train_cfg, data_spec = _configs_from_resolved(resolved)
    data = synth_generate(data_spec)
    train_idx, _, _ = split_query_gallery(data, data_spec)
    state = build_model(model_cfg, train_cfg.seed)
    records = fit(state, data, train_cfg, sample_positions=train_idx)
    write_log(records, out_dir / "log.jsonl")
    save_checkpoint(state, out_dir / "checkpoint.lkar")
    if records:
        print(f"step {records[-1]['step']}: total loss {records[-1]['total']:.4f}")
    print(f"wrote {out_dir / 'checkpoint.lkar'}")
    return 0


def _load_npy_images(samples):
    images = []
    for s in samples:
        if s.path is None:
            raise ValueError("sample has no image path for model evaluation")
        if not s.path.endswith(".npy"):
            raise ValueError(f"unsupported image format for {s.path!r} (expected .npy)")
        images.append(np.load(s.path))
    return np.stack(images).astype(np.float32)


def _model_features(state, samples, batch=32):
    feats = []
    images = _load_npy_images(samples)
    for start in range(0, len(images), batch):
        feats.append(extract_features(state, images[start : start + batch]).data)
    return np.concatenate(feats, axis=0)


def cmd_eval(args):
    query = load_manifest(args.query, split="query")
    gallery = load_manifest(args.gallery, split="gallery")
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint)
        report = evaluate_features(
            _model_features(state, query.samples),
            query.samples,
            _model_features(state, gallery.samples),
            gallery.samples,
            max_rank=args.max_rank,
        )
    else:
        report = evaluate(query, gallery, max_rank=args.max_rank)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="lkareid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="decomposition, cost, and kernel-size report")
    p.add_argument("--K", type=int, default=21, help="nominal large kernel size (odd)")
    p.add_argument("--d", type=int, default=3, help="dilation of the decomposition")
    p.add_argument("--C", type=int, default=256, help="channel count")
    p.add_argument("--H", type=int, default=32)
    p.add_argument("--W", type=int, default=32)
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--b", type=float, default=2.0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scope", choices=("all", "lka", "hca", "losses", "model"), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="toy-scale training on the synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mAP/CMC evaluation of manifests")
    p.add_argument("--query", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--checkpoint", help="extract features with this model instead")
    p.add_argument("--out", help="write the report JSON here")
    p.add_argument("--max-rank", type=int, default=10)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
