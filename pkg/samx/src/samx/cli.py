"""Command line front end: `samx export --images DIR --out DIR`."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import ExportError
from .export import ExportJob, run_export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="samx",
        description="Export SAM ViT-H features and mask proposals as TRVF/TRVM files.",
        epilog="Exit codes: 0 success, 1 export failure, 2 bad arguments.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")
    p = sub.add_parser("export", help="process a directory of RGB images")
    p.add_argument("--images", required=True, help="directory of input images")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--points-per-side", type=int, default=32,
                   help="mask query grid size (default 32)")
    p.add_argument("--conf-threshold", type=float, default=0.0,
                   help="drop proposals below this confidence (default 0)")
    p.add_argument("--backend", choices=("sam", "stub"), default="sam",
                   help="'sam' needs --weights; 'stub' is a deterministic dry run")
    p.add_argument("--weights", default=None, help="path to the ViT-H checkpoint")
    p.add_argument("--device", default="cpu", help="torch device (default cpu)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    if args.points_per_side < 1:
        print("error: --points-per-side must be at least 1", file=sys.stderr)
        return 2
    job = ExportJob(
        images=Path(args.images),
        out=Path(args.out),
        points_per_side=args.points_per_side,
        conf_threshold=args.conf_threshold,
        backend=args.backend,
        weights=Path(args.weights) if args.weights else None,
        device=args.device,
    )
    try:
        doc = run_export(job)
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"exported {len(doc['frames'])} frames -> {args.out}")
    return 0


def run() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    run()
