"""Command-line entry point.

Subcommands: synth-data, train, build-atlas, baseline-atlas, evaluate,
ablate, sweep, gradcheck.  Configuration is file-first (--config JSON with
net/train/synth/iter sections) with flag overrides; every run writes its
resolved config next to its outputs.  Exit codes: 0 success, 1 validation
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

from . import tensorio
from .atlas import SubgroupFilter, build_atlas, save_atlas_result, subgroup_select
from .baseline import IterConfig, iterative_atlas
from .evalkit import (
    ABLATION_VARIANTS,
    SweepSpec,
    dice_transfer,
    evaluate_atlas,
    make_eval_groups,
    run_ablations,
    run_sweep,
    unregistered_baseline,
)
from .groupnet import NetConfig
from .synthgen import SynthConfig, make_group
from .trainer import TrainConfig, gradcheck, load_training_checkpoint, train


class CliValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliValidationError(f"{self.prog}: {message}\n{self.format_usage()}")


def _load_config(path):
    if path is None:
        return {}
    with open(path) as f:
        return json.load(f)


def _write_resolved(out_dir, config):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as f:
        json.dump(config, f, indent=1, default=str)


def _add_filter_flags(p):
    p.add_argument("--modality")
    p.add_argument("--age-min", type=float)
    p.add_argument("--age-max", type=float)
    p.add_argument("--diagnosis")
    p.add_argument("--ids", help="comma-separated id list")
    p.add_argument("--max-size", type=int)


def _filter_from_args(args):
    ids = args.ids.split(",") if args.ids else None
    return SubgroupFilter(
        modality=args.modality,
        age_min=args.age_min,
        age_max=args.age_max,
        diagnosis=args.diagnosis,
        ids=ids,
        max_size=args.max_size,
    )


def build_parser():
    parser = _Parser(prog="groupatlas", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="materialize synthetic groups to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--group-size", type=int, default=4)
    p.add_argument("--config")

    p = sub.add_parser("train", help="train the registration network")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--resume")

    p = sub.add_parser("build-atlas", help="feed-forward atlas for a subgroup")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_filter_flags(p)

    p = sub.add_parser("baseline-atlas", help="iterative optimization atlas")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--outer-iters", type=int)
    p.add_argument("--inner-steps", type=int)
    p.add_argument("--step-size", type=float)
    p.add_argument("--lambda-reg", type=float)
    p.add_argument("--smooth-sigma", type=float)
    p.add_argument("--no-center", action="store_true")
    _add_filter_flags(p)

    p = sub.add_parser("evaluate", help="segmentation-transfer metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--groups", type=int, default=5)
    p.add_argument("--group-size", type=int, default=8)

    p = sub.add_parser("ablate", help="train and score model ablation variants")
    p.add_argument("--out", required=True)
    p.add_argument("--variants", default=",".join(ABLATION_VARIANTS))
    p.add_argument("--iterations", type=int, default=1500)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("sweep", help="hyperparameter sweep with CSV + plots")
    p.add_argument("--out", required=True)
    p.add_argument("--parameter", choices=("lambda_reg", "gamma_seg"), default="lambda_reg")
    p.add_argument("--values", help="comma-separated values (default: preset grid)")
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradient")
    p.add_argument("--seed", type=int, default=0)

    return parser


def _cmd_synth_data(args):
    cfg = _load_config(args.config)
    synth_config = SynthConfig(**cfg.get("synth", {}))
    os.makedirs(args.out, exist_ok=True)
    records = []
    for g in range(args.groups):
        group = make_group(synth_config, args.group_size, args.seed + g)
        for i, member in enumerate(group):
            stem = f"g{g:03d}_m{i:02d}"
            tensorio.write_tensor(os.path.join(args.out, stem + "_img.bin"), member.image.numpy())
            tensorio.write_tensor(os.path.join(args.out, stem + "_seg.bin"), member.seg.numpy())
            records.append(tensorio.ManifestRecord(
                id=stem, image_path=stem + "_img.bin", seg_path=stem + "_seg.bin",
                modality="synthetic", split="train",
            ))
    tensorio.save_manifest(tensorio.DatasetManifest(records=records, root=args.out),
                           os.path.join(args.out, "manifest.jsonl"))
    _write_resolved(args.out, {"synth": asdict(synth_config), "seed": args.seed,
                               "groups": args.groups, "group_size": args.group_size})
    print(f"wrote {len(records)} members to {args.out}")
    return 0


def _cmd_train(args):
    cfg = _load_config(args.config)
    train_kwargs = cfg.get("train", {})
    if args.seed is not None:
        train_kwargs["seed"] = args.seed
    if args.iterations is not None:
        train_kwargs["iterations"] = args.iterations
    train_config = TrainConfig(**train_kwargs)
    net_config = NetConfig(**cfg.get("net", {}))
    synth_config = SynthConfig(**cfg.get("synth", {}))
    manifest = tensorio.load_manifest(args.manifest) if args.manifest else None
    _write_resolved(args.out, {"net": asdict(net_config), "train": asdict(train_config),
                               "synth": asdict(synth_config)})
    ckpt = train(train_config, net_config, args.out, manifest=manifest,
                 synth_config=synth_config, resume_from=args.resume)
    print(f"final checkpoint: {ckpt}")
    return 0


def _cmd_build_atlas(args):
    net, _, _, _ = load_training_checkpoint(args.checkpoint)
    net.eval()
    manifest = tensorio.load_manifest(args.manifest)
    group = subgroup_select(manifest, _filter_from_args(args))
    result = build_atlas(net, group)
    save_atlas_result(result, args.out)
    report = evaluate_atlas(result, group)
    with open(os.path.join(args.out, "report.json"), "w") as f:
        json.dump(asdict(report), f, indent=1)
    _write_resolved(args.out, {"checkpoint": args.checkpoint, "net": asdict(net.config)})
    print(f"atlas for {len(group)} members -> {args.out} "
          f"(dice={report.mean_dice:.4f}, folds={report.total_folds}, "
          f"centrality={report.centrality:.3e})")
    return 0


def _cmd_baseline_atlas(args):
    cfg = _load_config(args.config)
    iter_kwargs = cfg.get("iter", {})
    for flag, key in (("outer_iters", "outer_iters"), ("inner_steps", "inner_steps"),
                      ("step_size", "step_size"), ("lambda_reg", "lambda_reg"),
                      ("smooth_sigma", "smooth_sigma")):
        value = getattr(args, flag)
        if value is not None:
            iter_kwargs[key] = value
    if args.no_center:
        iter_kwargs["center_fields"] = False
    config = IterConfig(**iter_kwargs)
    manifest = tensorio.load_manifest(args.manifest)
    group = subgroup_select(manifest, _filter_from_args(args))
    result = iterative_atlas(group, config)
    save_atlas_result(result, args.out)
    report = evaluate_atlas(result, group)
    with open(os.path.join(args.out, "report.json"), "w") as f:
        json.dump(asdict(report), f, indent=1)
    _write_resolved(args.out, {"iter": asdict(config)})
    print(f"baseline atlas for {len(group)} members -> {args.out} "
          f"(final objective {result.objective_trace[-1][1]:.6f})")
    return 0


def _cmd_evaluate(args):
    net, _, _, _ = load_training_checkpoint(args.checkpoint)
    net.eval()
    groups = make_eval_groups(args.groups, args.group_size, seed=args.seed + 31337)
    rows = []
    for gi, group in enumerate(groups):
        report = dice_transfer(net, group, seed=args.seed + gi)
        rows.append({
            "group": gi,
            "dice": report.mean_dice,
            "unregistered_dice": unregistered_baseline(group, seed=args.seed + gi),
            "folds": report.total_folds,
            "centrality": report.centrality,
        })
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "evaluation.json")
    with open(out_path, "w") as f:
        json.dump(rows, f, indent=1)
    _write_resolved(args.out, {"checkpoint": args.checkpoint, "seed": args.seed})
    mean_dice = sum(r["dice"] for r in rows) / len(rows)
    mean_base = sum(r["unregistered_dice"] for r in rows) / len(rows)
    print(f"transfer dice {mean_dice:.4f} vs unregistered {mean_base:.4f} -> {out_path}")
    return 0


def _cmd_ablate(args):
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    csv_path = run_ablations(variants, args.out, iterations=args.iterations, seed=args.seed)
    _write_resolved(args.out, {"variants": variants, "iterations": args.iterations,
                               "seed": args.seed})
    print(f"ablation table: {csv_path}")
    return 0


def _cmd_sweep(args):
    values = tuple(float(v) for v in args.values.split(",")) if args.values else ()
    spec = SweepSpec(parameter=args.parameter, values=values,
                     iterations=args.iterations, seed=args.seed)
    csv_path, plots = run_sweep(spec, args.out)
    _write_resolved(args.out, asdict(spec))
    print(f"sweep CSV: {csv_path}; plots: {', '.join(plots)}")
    return 0


def _cmd_gradcheck(args):
    err = gradcheck(seed=args.seed)
    print(f"max relative gradient error: {err:.3e}")
    return 0


_HANDLERS = {
    "synth-data": _cmd_synth_data,
    "train": _cmd_train,
    "build-atlas": _cmd_build_atlas,
    "baseline-atlas": _cmd_baseline_atlas,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
    "sweep": _cmd_sweep,
    "gradcheck": _cmd_gradcheck,
}


def dispatch(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliValidationError as e:
        print(str(e), file=sys.stderr)
        return 1
    try:
        return _HANDLERS[args.command](args)
    except (ValueError, FileNotFoundError, tensorio.ManifestError,
            tensorio.TensorFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


def main(argv=None):
    return dispatch(argv if argv is not None else sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
