"""Command line front end: build, validate, query, evaluate, profile, tune.

Exit codes: 0 success, 1 bad input (usage or validation), 2 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .autotune import SearchRanges, configure
from .evaluation import bench, evaluate
from .model import (AGGREGATIONS, MODES, SchedulerConfig, ValidationError,
                    load_index, load_queries, save_index, save_queries)
from .report import render_figures, write_per_level_csv
from .scheduler import process_query
from .scoring import Similarity
from .synth import generate, load_synth_spec


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this tool reserves 2 for I/O."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_io_flags(p: argparse.ArgumentParser, *, queries_required: bool = True) -> None:
    p.add_argument("--index", required=True, metavar="DIR", help="index directory")
    p.add_argument("--queries", required=queries_required, metavar="FILE",
                   help="JSON-lines query file")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("scheduler configuration")
    g.add_argument("--config", metavar="FILE",
                   help="JSON config file; the flags below override its fields")
    g.add_argument("--k", type=int, help="result list length")
    g.add_argument("--mode", choices=MODES)
    g.add_argument("--levels", metavar="COUNTS",
                   help="comma separated segment counts, e.g. 4,9,16")
    g.add_argument("--T", dest="initial_ratio", type=float,
                   help="survivor ratio after the first level, in (0, 1]")
    g.add_argument("--alpha", type=float, help="per-level survivor decay in (0, 1]")
    g.add_argument("--tau", metavar="TAU",
                   help='early-exit rank agreement threshold in [-1, 1], or "disabled"')
    g.add_argument("--aggregation", choices=AGGREGATIONS)
    g.add_argument("--include-global-additive", action="store_true", default=None,
                   help="add the whole-image similarity to hierarchical scores")
    g.add_argument("--no-prune", action="store_true",
                   help="keep every candidate at every level (T=1, alpha=1)")
    g.add_argument("--no-exit", action="store_true", help="disable the early exit")
    g.add_argument("--sim", choices=[s.value for s in Similarity], default="cosine",
                   help="similarity function (default cosine)")


def _parse_levels(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ValidationError(f"--levels expects comma separated integers, got {text!r}")


def _load_config(args: argparse.Namespace) -> SchedulerConfig:
    wire: dict = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        if not isinstance(obj, dict):
            raise ValidationError("config file must hold a JSON object")
        obj.pop("ranges", None)  # tolerate combined config + search-range files
        wire.update(obj)
    if args.k is not None:
        wire["K"] = args.k
    if args.mode is not None:
        wire["mode"] = args.mode
    if args.levels is not None:
        wire["levels"] = list(_parse_levels(args.levels))
    if args.initial_ratio is not None:
        wire["T"] = args.initial_ratio
    if args.alpha is not None:
        wire["alpha"] = args.alpha
    if args.tau is not None:
        if args.tau == "disabled":
            wire["tau"] = "disabled"
        else:
            try:
                wire["tau"] = float(args.tau)
            except ValueError:
                raise ValidationError(
                    f'--tau must be a number or "disabled", got {args.tau!r}')
    if args.aggregation is not None:
        wire["aggregation"] = args.aggregation
    if args.include_global_additive:
        wire["include_global_additive"] = True
    if args.no_prune:
        wire["T"] = 1.0
        wire["alpha"] = 1.0
    if args.no_exit:
        wire["tau"] = "disabled"
    try:
        return SchedulerConfig.from_json_dict(wire)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config: {exc}")


def _print_report(obj: dict, out) -> None:
    """Flatten a report dict to tab separated key/value lines."""
    for key, value in obj.items():
        if isinstance(value, dict):
            for sub, val in value.items():
                print(f"{key}@{sub}\t{val}", file=out)
        else:
            print(f"{key}\t{value}", file=out)


def cmd_synth(args: argparse.Namespace) -> int:
    spec = load_synth_spec(args.spec)
    index, queries = generate(spec)
    save_index(index, args.out_index)
    print(f"wrote index: images={index.n_images} dim={index.dim} "
          f"levels={','.join(str(c) for c in index.level_counts)}")
    if args.out_queries:
        save_queries(queries, args.out_queries)
        print(f"wrote queries: {len(queries)}")
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    index = load_index(args.index)
    levels = ",".join(str(c) for c in index.level_counts)
    print(f"ok: images={index.n_images} dim={index.dim} levels={levels} "
          f"normalized={str(index.normalized).lower()}")
    if args.queries:
        queries = load_queries(args.queries, index=index,
                               check_ground_truth=args.check_ground_truth)
        print(f"ok: queries={len(queries)}")
    return 0


def cmd_query(args: argparse.Namespace) -> int:
    index = load_index(args.index)
    queries = load_queries(args.queries, index=index)
    config = _load_config(args)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        negative_best = False
        for query in sorted(queries, key=lambda q: q.query_id):
            result, state = process_query(query, index, config, kind=args.sim)
            negative_best |= state.min_subquery_best < 0
            obj = {
                "query_id": query.query_id,
                "results": [{"id": i, "score": s} for i, s in result.entries],
            }
            out.write(json.dumps(obj, separators=(",", ":")) + "\n")
    finally:
        if args.out:
            out.close()
    if negative_best and config.aggregation == "product" and config.mode != "single":
        print("warning: some sub-query maxima were negative; their product "
              "aggregation can invert preferences (consider log_sum)", file=sys.stderr)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    index = load_index(args.index)
    queries = load_queries(args.queries, index=index, check_ground_truth=True)
    config = _load_config(args)
    report = evaluate(index, queries, config, kind=args.sim, workers=args.workers)
    obj = report.to_json_dict()
    obj.pop("diagnostics", None)
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(report.to_json_dict(), fh, indent=2)
            fh.write("\n")
    _print_report(obj, sys.stdout)
    return 0


def cmd_profile(args: argparse.Namespace) -> int:
    index = load_index(args.index)
    queries = load_queries(args.queries, index=index, check_ground_truth=True)
    config = _load_config(args)
    report = evaluate(index, queries, config, kind=args.sim, workers=args.workers,
                      diagnostics=True, diag_sample=args.diag_sample)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = write_per_level_csv(report.diagnostics, out_dir / "per_level.csv")
    figures = render_figures(report.diagnostics, out_dir)
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, indent=2)
        fh.write("\n")
    for path in [csv_path, out_dir / "report.json", *figures]:
        print(f"wrote {path}")
    return 0


def cmd_autotune(args: argparse.Namespace) -> int:
    index = load_index(args.index)
    queries = load_queries(args.queries, index=index, check_ground_truth=True)
    with open(args.ranges, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise ValidationError("ranges file must hold a JSON object")
    obj = obj.get("ranges", obj)
    if args.budgets is not None:
        try:
            obj["budgets"] = [float(b) for b in args.budgets.split(",")]
        except ValueError:
            raise ValidationError(
                f"--budgets expects comma separated numbers, got {args.budgets!r}")
    ranges = SearchRanges.from_json_dict(obj)
    table = configure(ranges, index, queries, k=args.k if args.k else 10,
                      kind=args.sim, latency_convention=args.convention)
    payload = json.dumps(table.to_json_obj(), indent=2) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(payload)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(payload)
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    index = load_index(args.index)
    queries = load_queries(args.queries, index=index)
    config = _load_config(args)
    report = bench(index, queries, config, kind=args.sim, warmup=args.warmup,
                   iterations=args.iterations, workers=args.workers)
    _print_report(report.to_json_dict(), sys.stdout)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hmir",
                     description="Hierarchical multi-vector image retrieval.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic planted benchmark")
    p.add_argument("--spec", required=True, metavar="FILE", help="generator spec JSON")
    p.add_argument("--out-index", required=True, metavar="DIR")
    p.add_argument("--out-queries", metavar="FILE")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="check an index directory (and optional queries)")
    _add_io_flags(p, queries_required=False)
    p.add_argument("--check-ground-truth", action="store_true",
                   help="require every named ground-truth image to exist")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("query", help="rank the index for each query")
    _add_io_flags(p)
    _add_config_flags(p)
    p.add_argument("--out", metavar="FILE", help="write JSON-lines results here")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="score a labeled query set")
    _add_io_flags(p)
    _add_config_flags(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--json", metavar="FILE", help="also write the full report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="per-level diagnostics: CSV, JSON and figures")
    _add_io_flags(p)
    _add_config_flags(p)
    p.add_argument("--out-dir", required=True, metavar="DIR")
    p.add_argument("--diag-sample", type=int, default=256,
                   help="max queries used for the per-level sweep")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("autotune", help="search configurations under latency budgets")
    _add_io_flags(p)
    p.add_argument("--ranges", required=True, metavar="FILE",
                   help='JSON search grids: {"tau","S","alpha","T","budgets"}')
    p.add_argument("--budgets", metavar="NUMS", help="override budgets, comma separated")
    p.add_argument("--k", type=int, help="result list length (default 10)")
    p.add_argument("--sim", choices=[s.value for s in Similarity], default="cosine")
    p.add_argument("--convention", choices=["level", "entering"], default="level",
                   help="latency model weighting (default level)")
    p.add_argument("--out", metavar="FILE", help="write the budget table here")
    p.set_defaults(func=cmd_autotune)

    p = sub.add_parser("bench", help="time repeated runs over a query set")
    _add_io_flags(p)
    _add_config_flags(p)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--iterations", type=int, default=3)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help exits 0, usage errors exit 1
        code = exc.code
        return code if isinstance(code, int) else 0
    try:
        return args.func(args)
    except ValidationError as exc:
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
