"""Command-line interface.

Exit codes: 0 success, 2 usage errors, 3 malformed or incompatible
inputs, 4 numerical failure during training.
"""
from __future__ import annotations

import argparse
import math
import sys
import time
from pathlib import Path

import numpy as np

from .cascade import TrainConfig, build_cascade_model, run_cascade_batch, train
from .checkpoint import (checkpoint_load, checkpoint_save,
                         pose_checkpoint_load, pose_checkpoint_save)
from .errors import DataError, NumericError
from .metrics import BUCKET_LABELS, evaluate
from .moe import VARIANTS, ModelDims, count_parameters, expert_usage
from .pose import train_pose
from .synthdata import generate_dataset, load_split


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def _write_csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(row) for row in rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _load_dataset(directory: str, subset: str):
    return load_split(directory, subset)


def _check_compatible(model, dataset, model_path: str) -> None:
    have = dataset.template.num_landmarks
    want = model.dims.landmarks
    if have != want:
        raise DataError(
            f"{model_path} expects {want} landmarks but the dataset provides {have}")


# -------------------------------------------------------------- subcommands


def _cmd_gen_data(args) -> int:
    train_ids, test_ids = generate_dataset(args.out, args.n, args.seed,
                                           split=args.split,
                                           image_size=args.image_size,
                                           yaw_max_deg=args.yaw_max_deg,
                                           pitch_max_deg=args.pitch_max_deg,
                                           roll_max_deg=args.roll_max_deg)
    print(f"wrote {len(train_ids)} train / {len(test_ids)} test samples to {args.out}")
    return 0


def _cmd_train_pose(args) -> int:
    dataset = _load_dataset(args.data, "train")
    model, history = train_pose(dataset.samples, seed=args.seed, epochs=args.epochs,
                                batch_size=args.batch_size, lr=args.lr)
    for epoch, loss in history:
        print(f"epoch {epoch}  loss {_fmt(loss)}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pose_checkpoint_save(model, out, args.seed)
    print(f"saved pose model to {out}")
    return 0


def _cmd_train(args, parser) -> int:
    needs_pose = args.variant.startswith("pose-")
    if needs_pose and not (args.pose_model or args.pose_oracle):
        parser.error(f"variant {args.variant} needs --pose-model or --pose-oracle")
    if not needs_pose and (args.pose_model or args.pose_oracle):
        parser.error(f"variant {args.variant} does not take pose options")

    dataset = _load_dataset(args.data, "train")
    dims = ModelDims.desk()
    if dataset.template.num_landmarks != dims.landmarks:
        raise DataError(
            f"training expects {dims.landmarks} landmarks but the dataset "
            f"provides {dataset.template.num_landmarks}")

    pose_mode = "none"
    pose_model = None
    if args.pose_oracle:
        pose_mode = "oracle"
    elif args.pose_model:
        pose_mode = "model"
        pose_model = pose_checkpoint_load(args.pose_model)

    rng = np.random.default_rng(args.seed)
    model = build_cascade_model(args.variant, dims, args.stages, rng,
                                pose_mode=pose_mode, pose_model=pose_model,
                                seed=args.seed)
    config = TrainConfig(seed=args.seed, stages=args.stages,
                         epochs_per_stage=args.epochs, batch_size=args.batch_size,
                         lr=args.lr, translate_sigma=args.translate_sigma,
                         scale_sigma=args.scale_sigma, flip_prob=args.flip_prob)
    start = time.perf_counter()
    model, history = train(model, dataset, config)
    elapsed = time.perf_counter() - start

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    extra = {"lr": _fmt(config.lr), "epochs_per_stage": str(config.epochs_per_stage),
             "batch_size": str(config.batch_size),
             "translate_sigma": _fmt(config.translate_sigma),
             "scale_sigma": _fmt(config.scale_sigma),
             "flip_prob": _fmt(config.flip_prob)}
    checkpoint_save(model, out, extra=extra)
    _write_csv(out.parent / "loss_history.csv", ["stage", "epoch", "mean_loss"],
               ([str(s), str(e), _fmt(l)] for s, e, l in history))
    print(f"trained {args.variant} for {args.stages} stages in {elapsed:.1f}s")
    print(f"saved checkpoint to {out}")
    return 0


def _cmd_eval(args) -> int:
    model, header = checkpoint_load(args.model)
    dataset = _load_dataset(args.data, args.subset)
    _check_compatible(model, dataset, args.model)
    report = evaluate(model, dataset)
    print(f"variant          {header['variant']}")
    print(f"samples          {report.num_samples}")
    print(f"overall NME (%)  {_fmt(report.overall_nme)}")
    for label, value, count in zip(BUCKET_LABELS, report.bucket_nme, report.bucket_counts):
        shown = _fmt(value) if value is not None else "n/a"
        print(f"yaw {label:<8} {shown}  ({count} samples)")
    print(f"bucket mean      {_fmt(report.bucket_mean)}")
    for warning in report.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    if args.csv:
        path = Path(args.csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        _write_csv(path, ["sample_id", "yaw_deg", "nme_bbox", "nme_interpupil"],
                   ([r.sample_id, _fmt(r.yaw_deg), _fmt(r.nme_bbox_pct),
                     _fmt(r.nme_interpupil_pct)] for r in report.per_sample))
        print(f"wrote per-sample results to {path}")
    return 0


def _cmd_introspect(args) -> int:
    model, header = checkpoint_load(args.model)
    if header["variant"] == "baseline":
        raise DataError("the baseline variant has no gates to introspect")
    dataset = _load_dataset(args.data, args.subset)
    _check_compatible(model, dataset, args.model)
    _, gates = run_cascade_batch(model, dataset.samples, collect_stage1=True)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rep = gates["rep"]
    reg = gates["reg"]
    rows = []
    for i, sample in enumerate(dataset.samples):
        rep_arg = int(np.argmax(rep[i])) + 1 if rep is not None else 1
        reg_arg = int(np.argmax(reg[i])) + 1 if reg is not None else 1
        weight_row = rep[i] if rep is not None else reg[i]
        rows.append([sample.sample_id,
                     _fmt(math.degrees(sample.pose.yaw)),
                     _fmt(math.degrees(sample.pose.pitch)),
                     _fmt(math.degrees(sample.pose.roll)),
                     str(rep_arg), str(reg_arg), _fmt(float(np.max(weight_row)))])
    _write_csv(out_dir / "clusters.csv",
               ["sample_id", "yaw_deg", "pitch_deg", "roll_deg",
                "argmax_leaf_representation", "argmax_leaf_regression", "max_weight"],
               rows)

    usage_rows = []
    for layer, mat in (("representation", rep), ("regression", reg)):
        if mat is None:
            continue
        for rank, value in enumerate(expert_usage(mat), start=1):
            usage_rows.append([layer, str(rank), _fmt(value)])
    _write_csv(out_dir / "cumulative_usage.csv",
               ["layer", "rank", "mean_cumulative_weight"], usage_rows)
    print(f"wrote clusters.csv and cumulative_usage.csv to {out_dir}")
    return 0


def _cmd_param_report(args) -> int:
    dims = ModelDims.desk() if args.scale == "desk" else ModelDims.full()
    base = count_parameters("baseline", dims)
    print(f"{'variant':<18} {'parameters':>12} {'vs baseline':>12}")
    for name in VARIANTS:
        total = count_parameters(name, dims)
        delta = 100.0 * (total - base) / base
        print(f"{name:<18} {total:>12} {delta:>+11.2f}%")
    return 0


# --------------------------------------------------------------- arg parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="treemoe",
        description="Tree-gated mixture-of-experts landmark cascade")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--split", type=float, default=0.8)
    p.add_argument("--image-size", type=int, default=96)
    p.add_argument("--yaw-max-deg", type=float, default=90.0)
    p.add_argument("--pitch-max-deg", type=float, default=20.0)
    p.add_argument("--roll-max-deg", type=float, default=15.0)

    p = sub.add_parser("train-pose", help="train the pose estimator")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)

    p = sub.add_parser("train", help="train a landmark cascade")
    p.add_argument("--variant", required=True, choices=VARIANTS)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--stages", type=int, default=4)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--translate-sigma", type=float, default=10.0)
    p.add_argument("--scale-sigma", type=float, default=0.1)
    p.add_argument("--flip-prob", type=float, default=0.5)
    p.add_argument("--pose-model", help="pose checkpoint for pose-gated variants")
    p.add_argument("--pose-oracle", action="store_true",
                   help="gate on ground-truth pose instead of a pose model")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subset", default="test", choices=("train", "test"))
    p.add_argument("--csv", help="write per-sample results to this file")

    p = sub.add_parser("introspect", help="dump gate activations for analysis")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subset", default="test", choices=("train", "test"))
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("param-report", help="print per-variant parameter counts")
    p.add_argument("--scale", default="desk", choices=("desk", "full"))

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        if args.command == "train-pose":
            return _cmd_train_pose(args)
        if args.command == "train":
            return _cmd_train(args, parser)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "introspect":
            return _cmd_introspect(args)
        if args.command == "param-report":
            return _cmd_param_report(args)
        raise AssertionError(args.command)
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
