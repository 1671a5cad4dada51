"""Command-line surface: synth, train, translate, evaluate, ablate."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .ablation import PRESETS, run_ablation
from .config import TrainConfig
from .data import list_images, load_image, write_synthetic_dataset
from .metrics import ToyConvExtractor, evaluate_sets
from .training import train, translate


def _num_workers(args) -> int:
    if getattr(args, "num_workers", None) is not None:
        return args.num_workers
    return int(os.environ.get("AVGAN_NUM_WORKERS", "0"))


def _load_config(args) -> TrainConfig:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {}
    for flag, key in (
        ("seed", "seed"),
        ("max_steps", "max_steps"),
        ("n_regions", "n_regions"),
        ("region_size", "region_size"),
        ("region_mode", "region_mode"),
        ("shared_generators", "shared_generators"),
        ("theta", "theta"),
        ("lr", "lr"),
        ("checkpoint_every", "checkpoint_every"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return config.replace(**overrides)


def _domains(data_root: Path) -> tuple[str, str]:
    manifest = data_root / "manifest.json"
    if manifest.exists():
        doms = json.loads(manifest.read_text())["domains"]
        return doms[0], doms[1]
    return "A", "B"


def _add_common(parser):
    parser.add_argument("--config", type=Path, default=None, help="flat JSON config file")
    parser.add_argument("--seed", type=int, default=None)


def _add_train_flags(parser):
    parser.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    parser.add_argument("--n-regions", dest="n_regions", type=int, default=None)
    parser.add_argument("--region-size", dest="region_size", type=int, default=None)
    parser.add_argument("--region-mode", dest="region_mode",
                        choices=("attention", "fixed"), default=None)
    parser.add_argument("--shared-generators", dest="shared_generators",
                        action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--theta", type=float, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None)
    parser.add_argument("--num-workers", dest="num_workers", type=int, default=None,
                        help="loader workers (default: AVGAN_NUM_WORKERS or 0)")


def cmd_synth(args) -> int:
    manifest = write_synthetic_dataset(
        args.out_dir,
        count_train=args.count,
        count_test=args.test_count,
        seed=args.seed if args.seed is not None else 0,
        size=args.size,
    )
    print(json.dumps({"out_dir": str(args.out_dir), "counts": manifest["counts"]}))
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    dom_a, dom_b = _domains(args.data_dir)
    checkpoint = train(
        config,
        args.data_dir / dom_a / "train",
        args.data_dir / dom_b / "train",
        args.out_dir,
        resume=args.resume,
        num_workers=_num_workers(args),
    )
    print(json.dumps({"checkpoint": str(checkpoint), "steps": config.max_steps}))
    return 0


def cmd_translate(args) -> int:
    outputs = translate(
        args.checkpoint, args.input_dir, args.out_dir, save_coords=args.save_coords
    )
    print(json.dumps({"out_dir": str(args.out_dir), "count": len(outputs)}))
    return 0


def cmd_evaluate(args) -> int:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    translated = [load_image(p) for p in list_images(args.translated)]
    target = [load_image(p) for p in list_images(args.target)]
    source = [load_image(p) for p in list_images(args.source)] if args.source else None
    report = evaluate_sets(
        translated, target, source_images=source,
        extractor=ToyConvExtractor(),
        config_hash=config.config_hash(),
        stain_matrix=config.stain_matrix,
    )
    if args.out:
        report.to_json_file(args.out)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args)
    cells = PRESETS[args.preset]()
    grid = run_ablation(
        config,
        args.data_dir,
        args.out_dir,
        cells,
        steps_per_cell=args.steps_per_cell,
        num_workers=_num_workers(args),
    )
    print(json.dumps({"grid": str(grid), "cells": len(cells)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avgan",
        description="Attention-guided varifocal GAN for unpaired stain translation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render the synthetic two-domain dataset")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--count", type=int, default=64, help="training images per domain")
    p.add_argument("--test-count", type=int, default=16)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on an unpaired two-domain dataset")
    p.add_argument("--data-dir", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--resume", action="store_true")
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate a directory of patches")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input-dir", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--save-coords", action="store_true")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="score translated images")
    p.add_argument("--translated", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--source", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None, help="write the report JSON here")
    p.add_argument("--config", type=Path, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the ablation grid")
    p.add_argument("--data-dir", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--preset", choices=sorted(PRESETS), default="full")
    p.add_argument("--steps-per-cell", dest="steps_per_cell", type=int, default=50)
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
