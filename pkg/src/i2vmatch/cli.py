"""Command-line surface.

Subcommands: synth (emit a dataset), train, eval, gradcheck, sweep,
export-features. Configuration comes from a JSON file mirroring the
RunConfig structure, with common fields overridable by flags. Exit codes:
0 success, 1 validation failure, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError, no_grad
from .data import generate_dataset, save_dataset
from .encoders import encode_image
from .evaluation import PROTOCOLS, extract_gallery_features
from .training import (
    RunConfig,
    SWEEP_AXES,
    TrainingAbort,
    benchmark_config,
    config_digest,
    evaluate_result,
    gradcheck_suite,
    load_checkpoint,
    report_document,
    save_checkpoint,
    sweep,
    sweep_table,
    train,
)


class ValidationFailure(Exception):
    pass


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        with open(args.config) as fh:
            cfg = RunConfig.from_dict(json.load(fh))
    else:
        cfg = benchmark_config()
    overrides = {}
    for field in ("seed", "epochs", "batches_per_epoch", "learning_rate",
                  "weight_decay", "lr_decay_every", "lr_decay_factor",
                  "num_nonlocal_blocks", "p", "k", "t", "stride",
                  "teacher_mode", "eval_clip_len", "k_max"):
        val = getattr(args, field, None)
        if val is not None:
            overrides[field] = val
    if getattr(args, "bp_to_video", None) is not None:
        cfg = replace(cfg, loss=replace(cfg.loss, bp_to_video=args.bp_to_video))
    if getattr(args, "margin", None) is not None:
        cfg = replace(cfg, loss=replace(cfg.loss, margin=args.margin))
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file (benchmark defaults if omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batches-per-epoch", dest="batches_per_epoch", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--lr-decay-every", dest="lr_decay_every", type=int)
    p.add_argument("--lr-decay-factor", dest="lr_decay_factor", type=float)
    p.add_argument("--num-nonlocal-blocks", dest="num_nonlocal_blocks", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--t", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--teacher-mode", dest="teacher_mode",
                   choices=("simultaneous", "pretrained"))
    p.add_argument("--bp-to-video", dest="bp_to_video", action="store_true",
                   default=None)
    p.add_argument("--eval-clip-len", dest="eval_clip_len", type=int)
    p.add_argument("--k-max", dest="k_max", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="i2vmatch",
        description="Image-to-video identity matching on synthetic data.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate and export a synthetic dataset")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output dataset file")

    p = sub.add_parser("train", help="train both encoders")
    _add_config_flags(p)
    p.add_argument("--out-dir", required=True, help="directory for checkpoint and log")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", choices=PROTOCOLS, default="I2V")
    p.add_argument("--config", help="optional config to verify against the checkpoint")
    p.add_argument("--out", help="write the JSON report here")

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--scope", choices=("all", "losses", "encoders"), default="all")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("sweep", help="train/eval one run per axis value")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True,
                   help="comma-separated axis values (e.g. 1,2,4,8 or on,off)")
    p.add_argument("--out", help="write the JSON rows here")

    p = sub.add_parser("export-features", help="export encoded features as text records")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--which", choices=("query", "gallery", "both"), default="both")
    p.add_argument("--out", required=True)
    return parser


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    dataset = generate_dataset(cfg.synth)
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset.videos)} videos "
          f"({len(dataset.query)} query / {len(dataset.gallery)} gallery) to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = train(cfg)
    ckpt = out_dir / "checkpoint.txt"
    save_checkpoint(result, ckpt)
    log = out_dir / "train_log.jsonl"
    log.write_text("\n".join(result.log_lines) + "\n")
    print(f"digest {config_digest(cfg)}")
    print(f"checkpoint -> {ckpt}")
    print(f"log -> {log}")
    return 0


def cmd_eval(args) -> int:
    result = load_checkpoint(args.checkpoint)
    if args.config:
        with open(args.config) as fh:
            supplied = RunConfig.from_dict(json.load(fh))
        if config_digest(supplied) != config_digest(result.config):
            raise ValidationFailure(
                "config digest mismatch between checkpoint and supplied config")
    report = evaluate_result(result, args.protocol)
    print(report.table())
    if args.out:
        Path(args.out).write_text(report_document(report, result.config))
        print(f"report -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    outcomes = gradcheck_suite(scope=args.scope, seeds=tuple(args.seeds), tol=args.tol)
    failed = False
    for oc in outcomes:
        status = "ok" if oc.passed else "FAIL"
        print(f"{status:4s} {oc.name:16s} seed={oc.seed} "
              f"max_rel_err={oc.max_rel_err:.3e} worst={oc.worst_param}")
        failed = failed or not oc.passed
    if failed:
        print("gradient checks FAILED")
        return 2
    print(f"all {len(outcomes)} checks passed (tol={args.tol:g})")
    return 0


def _parse_axis_values(axis: str, raw: str) -> list:
    vals = [v.strip() for v in raw.split(",") if v.strip()]
    if axis in ("T", "nonlocal_blocks"):
        return [int(v) for v in vals]
    if axis == "bp_to_video":
        return [v.lower() in ("1", "on", "true") for v in vals]
    return vals


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    values = _parse_axis_values(args.axis, args.values)
    rows = sweep(args.axis, values, cfg)
    print(sweep_table(rows))
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2) + "\n")
        print(f"rows -> {args.out}")
    return 0


def cmd_export_features(args) -> int:
    result = load_checkpoint(args.checkpoint)
    dataset, cfg = result.dataset, result.config
    lines = []
    dim = cfg.trunk.output_dim

    def record(identity, camera, vec):
        body = " ".join(repr(float(x)) for x in vec)
        lines.append(f"{identity} {camera} 1 {body}")

    if args.which in ("query", "both"):
        with no_grad():
            feats = encode_image(np.stack([v.frames[0] for v in dataset.query]),
                                 result.encoder).data
        for v, f in zip(dataset.query, feats):
            record(v.identity, v.camera, f)
    if args.which in ("gallery", "both"):
        index = extract_gallery_features(dataset.gallery, result.encoder,
                                         cfg.eval_clip_len)
        for ident, cam, f in zip(index.identities, index.cameras, index.features):
            record(int(ident), int(cam), f)
    Path(args.out).write_text(
        f"i2vmatch-dataset/1 dim={dim}\n" + "\n".join(lines) + "\n")
    print(f"wrote {len(lines)} feature records to {args.out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
    "export-features": cmd_export_features,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    try:
        return COMMANDS[args.command](args)
    except (ValidationFailure, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingAbort, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


def entrypoint():
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
