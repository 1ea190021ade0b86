"""Command line front end for the ingestion pipeline.

Exit codes: 0 success, 1 bad input, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .embedding import HashEmbedder
from .export import (DEFAULT_LEVELS, MAX_SKIP_FRACTION, embed_and_export,
                     load_dataset_manifest, load_decompositions)
from .segmentation import PipelineError


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _parse_levels(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise PipelineError(f"--levels expects comma separated integers, got {text!r}")


def cmd_export(args: argparse.Namespace) -> int:
    images = load_dataset_manifest(args.manifest)
    decompositions = (load_decompositions(args.decompositions)
                      if args.decompositions else None)
    embedder = HashEmbedder(dim=args.dim, seed=args.seed)
    report = embed_and_export(
        images, args.out_index, args.out_queries, embedder=embedder,
        levels=_parse_levels(args.levels), decompositions=decompositions,
        max_skip_fraction=args.max_skip)
    print(f"wrote index: images={report.n_images} dim={report.dim} "
          f"levels={','.join(str(c) for c in report.levels)}")
    print(f"wrote queries: {report.n_queries}")
    if report.n_skipped_images or report.n_skipped_captions:
        print(f"skipped: images={report.n_skipped_images} "
              f"captions={report.n_skipped_captions}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hmir-pipeline",
                     description="Image-caption dataset ingestion for hmir.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("export", help="segment, embed, and write container + queries")
    p.add_argument("--manifest", required=True, metavar="FILE",
                   help='dataset JSON: {"images":[{"id","path","captions"}]}')
    p.add_argument("--out-index", required=True, metavar="DIR")
    p.add_argument("--out-queries", required=True, metavar="FILE")
    p.add_argument("--levels", default=",".join(str(c) for c in DEFAULT_LEVELS),
                   metavar="COUNTS", help="segment counts per level (default %(default)s)")
    p.add_argument("--dim", type=int, default=32, help="embedding width (default 32)")
    p.add_argument("--seed", type=int, default=0, help="embedder seed (default 0)")
    p.add_argument("--decompositions", metavar="FILE",
                   help='JSON lines {"query_id","subs"} overriding the caption splitter')
    p.add_argument("--max-skip", type=float, default=MAX_SKIP_FRACTION,
                   help="abort when more than this fraction of items fail "
                        "(default %(default)s)")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else 0
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"error: malformed JSON: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
