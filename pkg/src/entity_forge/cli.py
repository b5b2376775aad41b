"""Command-line entry point.

Exit codes: 0 success, 1 partial failure (some images failed or doctor
found problems), 2 config or I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .tensorio import FormatError, read_feature_grid, read_manifest
from .pipeline import (
    ConfigError,
    emit_crop_requests,
    load_config,
    render_overlays,
    run_eval,
    run_explore,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="entity-forge",
        description="Hierarchical entity pseudo-labels from patch feature grids")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("explore", help="run the pseudo-label pipeline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--feature-mode", choices=("proxy", "exporter"),
                   default="proxy")
    p.add_argument("--responses", default=None,
                   help="crop-response directory (exporter mode)")

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None, help="also write results JSON here")

    p = sub.add_parser("render", help="write overlay PNGs")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("crop-requests", help="emit exporter crop requests")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("doctor", help="validate manifest and feature files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None)
    return parser


def _cmd_explore(args) -> int:
    config = load_config(args.config)
    report = run_explore(args.manifest, config, args.out,
                         feature_mode=args.feature_mode,
                         response_dir=args.responses)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 1 if report.failures else 0


def _cmd_eval(args) -> int:
    config = load_config(args.config)
    result, per_image = run_eval(args.pred, args.gt, config.eval)
    payload = dict(result.to_dict(), per_image=per_image)
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def _cmd_render(args) -> int:
    count = render_overlays(args.images, args.labels, args.out)
    print(f"wrote {count} overlay(s)")
    return 0


def _cmd_crop_requests(args) -> int:
    config = load_config(args.config)
    count = emit_crop_requests(args.manifest, config, args.out)
    print(f"wrote {count} crop request(s)")
    return 0


def _cmd_doctor(args) -> int:
    config = load_config(args.config)
    issues = 0
    records = read_manifest(args.manifest)
    for rec in records:
        problems = []
        if rec.working_size_px != config.working_size_px:
            problems.append(
                f"working size {rec.working_size_px} != configured "
                f"{config.working_size_px}")
        try:
            grid = read_feature_grid(rec.feature_path)
            if rec.working_size_px % grid.patch_stride_px != 0:
                problems.append("working size not divisible by patch stride")
            if (grid.height_patches * grid.patch_stride_px != rec.working_size_px
                    or grid.width_patches * grid.patch_stride_px
                    != rec.working_size_px):
                problems.append("grid does not tile the working image")
        except (OSError, FormatError) as exc:
            problems.append(str(exc))
        if problems:
            issues += 1
            print(f"{rec.image_id}: " + "; ".join(problems))
        else:
            print(f"{rec.image_id}: ok")
    print(f"{len(records) - issues}/{len(records)} image(s) ok")
    return 1 if issues else 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "explore": _cmd_explore,
        "eval": _cmd_eval,
        "render": _cmd_render,
        "crop-requests": _cmd_crop_requests,
        "doctor": _cmd_doctor,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, FormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
