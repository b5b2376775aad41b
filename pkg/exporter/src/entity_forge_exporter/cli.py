"""Exporter CLI: feature export, crop answering, synthetic generation."""

from __future__ import annotations

import argparse
import sys

from .backbones import BACKBONES, DEFAULT_BACKBONE, BackboneUnavailableError
from .export import ExportJob, answer_crops, export_features
from .synthetic import SyntheticSpec, write_synthetic_batch


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="entity-forge-exporter",
        description="Bridge real images and test data into SFG1 feature grids")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="extract patch features into SFG1 files")
    p.add_argument("images", nargs="+", help="image files")
    p.add_argument("--backbone", choices=sorted(BACKBONES),
                   default=DEFAULT_BACKBONE)
    p.add_argument("--working-size", type=int, default=1024)
    p.add_argument("--out", required=True)

    p = sub.add_parser("answer-crops", help="answer pipeline crop requests")
    p.add_argument("--requests", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--backbone", choices=sorted(BACKBONES),
                   default=DEFAULT_BACKBONE)
    p.add_argument("--working-size", type=int, default=1024)
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=1)
    p.add_argument("--grid-side", type=int, default=64)
    p.add_argument("--regions", type=int, default=5)
    p.add_argument("--gap", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--l-shape", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "export":
            job = ExportJob(image_paths=args.images, backbone=args.backbone,
                            working_size_px=args.working_size, out_dir=args.out)
            records = export_features(job)
            print(f"exported {len(records)} grid(s) to {args.out}")
            return 0 if records or not args.images else 1
        if args.command == "answer-crops":
            answered, errors = answer_crops(
                args.requests, args.images, args.out,
                backbone_name=args.backbone, working_size_px=args.working_size)
            print(f"answered {answered} request(s), {len(errors)} error(s)")
            return 1 if errors else 0
        specs = {
            f"synth{i:02d}": SyntheticSpec(
                height_patches=args.grid_side, width_patches=args.grid_side,
                regions=args.regions, gap=args.gap, seed=args.seed + i,
                l_shape=args.l_shape)
            for i in range(args.images)
        }
        manifest = write_synthetic_batch(specs, args.out)
        print(f"wrote {len(specs)} synthetic image(s); manifest at {manifest}")
        return 0
    except (BackboneUnavailableError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
