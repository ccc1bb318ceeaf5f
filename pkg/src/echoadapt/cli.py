"""Command-line entry point.

One subcommand per pipeline stage. Exit codes: 0 on success, 1 on a
runtime failure (bad data, missing files), 2 on a usage error. When
``--out`` is omitted, outputs land under the directory named by the
``ECHOADAPT_OUTPUT_ROOT`` environment variable (default: current
directory), in a folder named after the subcommand.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .errors import EchoAdaptError

OUTPUT_ROOT_VAR = "ECHOADAPT_OUTPUT_ROOT"


def _out_dir(args, subcommand: str) -> Path:
    if args.out is not None:
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ROOT_VAR, ".")) / subcommand


def _load_training_config(args, phase: str):
    from .pipelines import desk_profile, full_profile, load_run_config

    if args.config is not None:
        config = load_run_config(args.config)
    else:
        maker = {"desk": desk_profile, "full": full_profile}[args.profile]
        config = maker(phase, seed=args.seed if args.seed is not None else 0)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.steps is not None:
        config = replace(config, steps=args.steps)
    return config


def _add_training_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="run-config YAML; overrides --profile")
    sub.add_argument("--profile", choices=("desk", "full"), default="desk")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--steps", type=int, default=None, help="override step count")
    sub.add_argument("--data", required=True, help="dataset manifest (JSONL)")
    sub.add_argument("--out", default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="echoadapt",
        description="Mask-conditioned diffusion with low-rank cross-modality adaptation.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("pretrain", help="train every weight on a source corpus")
    _add_training_flags(p)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = subs.add_parser("scratch", help="train every weight on a target corpus")
    _add_training_flags(p)
    p.add_argument("--resume", default=None)

    p = subs.add_parser("adapt", help="train low-rank adapters on a frozen base")
    _add_training_flags(p)
    p.add_argument("--base", required=True, help="base model checkpoint")
    p.add_argument("--plan", required=True, help="label remap plan (YAML)")

    p = subs.add_parser("generate", help="sample one image per conditioning mask")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="manifest supplying the masks")
    p.add_argument("--split", default="train")
    p.add_argument("--plan", default=None)
    p.add_argument("--adapters", default=None)
    p.add_argument("--steps", type=int, default=32, help="solver steps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p = subs.add_parser("mix", help="combine real and synthetic training data")
    p.add_argument("--real", required=True)
    p.add_argument("--synthetic", required=True)
    p.add_argument("--ratio", type=float, default=1.0)
    p.add_argument("--out", default=None)

    p = subs.add_parser("eval", help="train/evaluate the segmentation harness")
    p.add_argument("--task", choices=("seg",), default="seg")
    p.add_argument("--train-data", default=None, help="manifest to train on")
    p.add_argument("--eval-data", required=True, help="manifest with the eval split")
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint", default=None, help="skip training, evaluate this")
    p.add_argument("--baseline", default=None, help="report JSON to diff against")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p = subs.add_parser("phantom", help="render a synthetic two-modality corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--modality", choices=("source", "target"), default="source")
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p = subs.add_parser("remap", help="rewrite every mask in a directory via a plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", default=None)

    return parser


def _cmd_pretrain(args) -> int:
    from .data import DatasetManifest
    from .pipelines import pretrain, save_run_config

    config = _load_training_config(args, "pretrain")
    manifest = DatasetManifest.load(args.data)
    out = _out_dir(args, "pretrain")
    out.mkdir(parents=True, exist_ok=True)
    save_run_config(config, out / "config.yaml")
    path = pretrain(config, manifest, out, resume_from=args.resume)
    print(path)
    return 0


def _cmd_scratch(args) -> int:
    from .data import DatasetManifest
    from .pipelines import save_run_config, train_scratch
    from .unet import UNetConfig

    config = _load_training_config(args, "scratch")
    manifest = DatasetManifest.load(args.data)
    n_classes = len(manifest.label_space.classes)
    if config.unet.cond_channels != n_classes:
        config = replace(
            config, unet=UNetConfig.from_dict(
                {**config.unet.to_dict(), "cond_channels": n_classes}
            )
        )
    out = _out_dir(args, "scratch")
    out.mkdir(parents=True, exist_ok=True)
    save_run_config(config, out / "config.yaml")
    path = train_scratch(config, manifest, out, resume_from=args.resume)
    print(path)
    return 0


def _cmd_adapt(args) -> int:
    from .data import DatasetManifest
    from .pipelines import adapt, save_run_config
    from .remap import load_plan

    config = _load_training_config(args, "adapt")
    manifest = DatasetManifest.load(args.data)
    plan = load_plan(args.plan)
    out = _out_dir(args, "adapt")
    out.mkdir(parents=True, exist_ok=True)
    save_run_config(config, out / "config.yaml")
    path = adapt(config, args.base, manifest, plan, out)
    print(path)
    return 0


def _cmd_generate(args) -> int:
    from .data import DatasetManifest
    from .pipelines import generate_from_manifest
    from .remap import load_plan
    from .sampler import SamplerConfig

    manifest = DatasetManifest.load(args.data)
    plan = load_plan(args.plan) if args.plan else None
    sampler = SamplerConfig(num_steps=args.steps, seed=args.seed)
    out = _out_dir(args, "generate")
    synth = generate_from_manifest(
        args.checkpoint, manifest, sampler, out,
        split=args.split, plan=plan, adapter=args.adapters,
    )
    print(f"{len(synth.entries)} images -> {out}")
    return 0


def _cmd_mix(args) -> int:
    from .data import DatasetManifest
    from .pipelines import augment_mix

    real = DatasetManifest.load(args.real)
    synth = DatasetManifest.load(args.synthetic)
    out = _out_dir(args, "mix")
    mixed = augment_mix(real, synth, args.ratio, out)
    print(f"{len(mixed.split('train'))} training entries -> {out}")
    return 0


def _cmd_eval(args) -> int:
    from .data import DatasetManifest
    from .reporting import format_comparison, write_metrics_report
    from .seg import SegConfig, evaluate_segmenter, train_segmenter

    eval_manifest = DatasetManifest.load(args.eval_data)
    out = _out_dir(args, "eval")
    out.mkdir(parents=True, exist_ok=True)
    checkpoint = args.checkpoint
    if checkpoint is None:
        if args.train_data is None:
            raise EchoAdaptError("eval needs --checkpoint or --train-data")
        train_manifest = DatasetManifest.load(args.train_data)
        space = train_manifest.label_space
        sample = train_manifest.entries[0]
        from .data import load_image

        resolution = load_image(train_manifest.root / sample.image).shape[0]
        config = SegConfig(
            classes=space,
            resolution=resolution,
            base_channels=args.base_channels,
            epochs=args.epochs,
            lr=args.lr,
            batch_size=args.batch_size,
            seed=args.seed,
        )
        checkpoint = train_segmenter(config, train_manifest, out)
    baseline = json.loads(Path(args.baseline).read_text()) if args.baseline else None
    report = evaluate_segmenter(
        checkpoint,
        eval_manifest,
        split=args.split,
        baseline=baseline,
        baseline_name=str(args.baseline),
    )
    if baseline is not None:
        order = [name for _, name in eval_manifest.label_space.classes]
        table = format_comparison(baseline, report, order)
        (out / "comparison.txt").write_text(table + "\n")
        print(table)
    write_metrics_report(out / "report.json", report)
    print(json.dumps({k: report[k] for k in ("global", "class_weighted")}))
    return 0


def _cmd_phantom(args) -> int:
    from .phantom import make_corpus

    out = _out_dir(args, "phantom")
    manifest = make_corpus(
        n=args.n,
        modality=args.modality,
        out_dir=out,
        resolution=args.resolution,
        seed=args.seed,
    )
    print(f"{len(manifest.entries)} pairs -> {out}")
    return 0


def _cmd_remap(args) -> int:
    from .remap import load_plan, remap_directory

    plan = load_plan(args.plan)
    out = _out_dir(args, "remap")
    written = remap_directory(plan, args.in_dir, out)
    print(f"{len(written)} masks -> {out}")
    return 0


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "scratch": _cmd_scratch,
    "adapt": _cmd_adapt,
    "generate": _cmd_generate,
    "mix": _cmd_mix,
    "eval": _cmd_eval,
    "phantom": _cmd_phantom,
    "remap": _cmd_remap,
}


def dispatch(argv: list[str]) -> int:
    """Route argv to a subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles --help (0) and usage errors (2)
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except EchoAdaptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
