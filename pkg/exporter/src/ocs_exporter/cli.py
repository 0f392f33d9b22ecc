"""pocs-export: command-line wrapper around the feature exporter."""

from __future__ import annotations

import argparse
import sys

from .export import BACKBONES, STAGES, ExportSpec, export_features


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pocs-export",
        description="Extract backbone features into a dataset directory.",
    )
    parser.add_argument("--backbone", choices=BACKBONES, required=True)
    parser.add_argument("--stage", choices=STAGES, default="final_gap")
    parser.add_argument("--images", nargs="+", required=True, help="image folder(s)")
    parser.add_argument("--out", required=True, help="output dataset directory")
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument(
        "--weights",
        default="pretrained",
        help="'pretrained', 'random', or a local checkpoint path",
    )
    parser.add_argument("--seed", type=int, default=0,
                        help="initialization seed for --weights random")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else int(exc.code)
    try:
        spec = ExportSpec(
            backbone=args.backbone,
            stage=args.stage,
            image_dirs=tuple(args.images),
            output_dir=args.out,
            batch_size=args.batch_size,
            weights=args.weights,
            seed=args.seed,
        )
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    try:
        out = export_features(spec)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote dataset directory {out}")
    return 0


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
