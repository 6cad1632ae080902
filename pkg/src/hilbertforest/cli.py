"""
Command-line interface: ``hilbertforest <command> [options]``
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .curve import DEFAULT_BITS_PER_AXIS
from .dataset import load_results, load_vectors, save_results, save_vectors
from .errors import HilbertForestError, ParameterError
from .evaluate import (
    GENERATORS,
    RunReport,
    append_report,
    brute_force_graph,
    brute_force_knn,
    describe_dataset,
    parse_grid,
    recall_at_k,
    sweep_graph,
    sweep_search,
    synth_dataset,
)
from .graph import build_graph_with_stats, graph_recall, load_graph, save_graph
from .parallel import set_num_threads
from .params import DEFAULT_K, DEFAULT_K_OUT, DEFAULT_LEAF_SIZE, GraphParams, SearchParams
from .search import (
    build_index,
    build_index_with_stats,
    count_distance_evals,
    load_index,
    save_index,
    search_with_stats,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class UsageError(Exception):
    """Invalid command line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(
        prog="hilbertforest",
        description="Hilbert-forest approximate nearest neighbor search and k-NN graph construction.",
        formatter_class=fmt,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--threads",
        type=_positive,
        default=None,
        help="Worker threads (default: available cores, at most 8)",
    )
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG logging"
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("gen-data", help="Write a synthetic dataset", formatter_class=fmt)
    p.add_argument("--count", type=int, required=True, help="Number of dataset points")
    p.add_argument("--dim", type=int, required=True, help="Vector dimension")
    p.add_argument("--generator", choices=GENERATORS, default="gaussian-mixture", help="Point distribution")
    p.add_argument("--clusters", type=int, default=10, help="Mixture components")
    p.add_argument("--spread", type=float, default=0.1, help="Per-axis cluster standard deviation")
    p.add_argument("--seed", type=int, default=0, help="Generator seed")
    p.add_argument("--out", type=Path, required=True, help="Vector file to write")
    p.add_argument("--queries", type=int, default=0, help="Extra points drawn from the same distribution")
    p.add_argument("--queries-out", type=Path, default=None, help="Vector file for the extra points")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-index", help="Build and save a search index", formatter_class=fmt)
    p.add_argument("--data", type=Path, required=True, help="Dataset vector file")
    p.add_argument("--out", type=Path, required=True, help="Index file to write")
    p.add_argument("--n-trees", type=int, required=True, help="Number of Hilbert trees")
    p.add_argument("--leaf-size", type=int, default=DEFAULT_LEAF_SIZE, help="Points per leaf")
    p.add_argument("--seed", type=int, default=0, help="Seed of the axis permutations")
    p.add_argument("--bits", type=int, default=DEFAULT_BITS_PER_AXIS, help="Grid bits per axis")
    p.add_argument("--report", type=Path, default=None, help="JSON Lines file to append stage timings to")
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("search", help="Search an index", formatter_class=fmt)
    p.add_argument("--index", type=Path, required=True, help="Index file")
    p.add_argument("--queries", type=Path, required=True, help="Query vector file")
    p.add_argument("--out", type=Path, required=True, help="Result file to write")
    _search_flags(p)
    p.add_argument("--truth", type=Path, default=None, help="Ground truth to score against")
    p.add_argument("--report", type=Path, default=None, help="JSON Lines file to append a report to")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("build-graph", help="Build an approximate k-NN graph", formatter_class=fmt)
    p.add_argument("--data", type=Path, required=True, help="Dataset vector file")
    p.add_argument("--out", type=Path, required=True, help="Graph file to write")
    p.add_argument("--n-sorts", type=int, required=True, help="Number of Hilbert sorts")
    p.add_argument("--k1", type=int, required=True, help="Window size per sort")
    p.add_argument("--k2", type=int, required=True, help="Sketch-stage survivors per point")
    p.add_argument("--k-out", type=int, default=DEFAULT_K_OUT, help="Neighbors per point")
    p.add_argument("--seed", type=int, default=0, help="Seed of the axis permutations")
    p.add_argument(
        "--exact-final",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="Rank survivors with float vectors instead of dequantized codes",
    )
    p.add_argument("--truth", type=Path, default=None, help="Exact graph to score against")
    p.add_argument("--report", type=Path, default=None, help="JSON Lines file to append a report to")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("ground-truth", help="Exact k-NN by brute force", formatter_class=fmt)
    p.add_argument("--data", type=Path, required=True, help="Dataset vector file")
    p.add_argument("--queries", type=Path, default=None, help="Query vector file (not with --graph)")
    p.add_argument("--k", type=int, default=None, help=f"Neighbors per row (default {DEFAULT_K}, or {DEFAULT_K_OUT} with --graph)")
    p.add_argument("--graph", action="store_true", help="Compute the exact k-NN graph of the dataset")
    p.add_argument("--out", type=Path, required=True, help="Result or graph file to write")
    p.set_defaults(func=cmd_ground_truth)

    p = sub.add_parser("eval", help="Score results against ground truth", formatter_class=fmt)
    p.add_argument("--results", type=Path, required=True, help="Result or graph file")
    p.add_argument("--truth", type=Path, required=True, help="Ground-truth result or graph file")
    p.add_argument("--k", type=int, default=None, help="Recall cutoff (default: truth width)")
    p.add_argument("--graph", action="store_true", help="Both files are graphs")
    p.add_argument("--report", type=Path, default=None, help="JSON Lines file to append a report to")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="Evaluate a grid of parameters", formatter_class=fmt)
    p.add_argument("--data", type=Path, required=True, help="Dataset vector file")
    p.add_argument("--queries", type=Path, default=None, help="Query vector file (search sweeps)")
    p.add_argument("--index", type=Path, default=None, help="Prebuilt index (search sweeps)")
    p.add_argument("--truth", type=Path, required=True, help="Ground-truth result or graph file")
    p.add_argument("--grid", type=Path, required=True, help="JSON list of parameter objects")
    p.add_argument("--graph", action="store_true", help="Sweep graph construction instead of search")
    p.add_argument("--leaf-size", type=int, default=DEFAULT_LEAF_SIZE, help="Points per leaf when building the index")
    p.add_argument("--seed", type=int, default=0, help="Index seed when building the index")
    p.add_argument("--report", type=Path, required=True, help="JSON Lines file to append reports to")
    p.set_defaults(func=cmd_sweep)
    return parser


def _search_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-trees", type=int, required=True, help="Trees consulted per query")
    p.add_argument("--k1", type=int, required=True, help="Candidates per tree")
    p.add_argument("--k2", type=int, required=True, help="Sketch-stage survivors")
    p.add_argument("--h", type=int, default=0, help="Master-order expansion radius")
    p.add_argument("--k", type=int, default=DEFAULT_K, help="Neighbors per query")
    p.add_argument(
        "--exact-final",
        action="store_true",
        help="Rank with float vectors instead of dequantized codes",
    )


def cmd_gen_data(args) -> None:
    if args.count < 1:
        raise ParameterError(f"--count must be >= 1, got {args.count}")
    if args.queries < 0:
        raise ParameterError(f"--queries must be >= 0, got {args.queries}")
    if args.queries and args.queries_out is None:
        raise ParameterError("--queries requires --queries-out")
    extra = args.queries
    ds = synth_dataset(
        args.count + extra, args.dim, args.generator, args.seed, args.clusters, args.spread
    )
    save_vectors(ds.take(range(args.count)), args.out)
    if extra:
        save_vectors(ds.take(range(args.count, args.count + extra)), args.queries_out)
    print(f"Wrote {args.count} vectors of dim {args.dim} to {args.out}")


def cmd_build_index(args) -> None:
    ds = load_vectors(args.data)
    index, stats = build_index_with_stats(
        ds, args.n_trees, leaf_size=args.leaf_size, seed=args.seed, bits_per_axis=args.bits
    )
    save_index(index, args.out)
    print(f"Built {index.n_trees} trees over {ds.count} points in {stats.seconds:.2f}s -> {args.out}")
    if args.report is not None:
        report = RunReport(
            task="build-index",
            params={"n": args.n_trees, "leaf_size": args.leaf_size, "bits_per_axis": args.bits},
            recall=0.0,
            seconds=stats.seconds,
            counters=stats.counters(),
            seed=args.seed,
            dataset=describe_dataset(ds, str(args.data)),
        )
        append_report(args.report, report)


def cmd_search(args) -> None:
    params = SearchParams(
        n=args.n_trees, k1=args.k1, k2=args.k2, h=args.h, k=args.k, exact_final=args.exact_final
    )
    index = load_index(args.index)
    queries = load_vectors(args.queries)
    rs, stats = search_with_stats(index, queries, params)
    save_results(rs, args.out)
    print(f"Searched {rs.query_count} queries in {stats.seconds:.2f}s -> {args.out}")
    if args.truth is not None:
        truth = load_results(args.truth, index.count)
        k = min(rs.k, truth.k)
        report = RunReport(
            task="search",
            params=params.to_dict(),
            recall=recall_at_k(rs, truth, k),
            seconds=stats.seconds,
            counters=count_distance_evals(stats),
            seed=index.seed,
            dataset=describe_dataset(index.dataset, str(args.index)),
        )
        print(f"recall@{k} = {report.recall:.4f}")
        if args.report is not None:
            append_report(args.report, report)


def cmd_build_graph(args) -> None:
    params = GraphParams(
        n=args.n_sorts,
        k1=args.k1,
        k2=args.k2,
        k_out=args.k_out,
        seed=args.seed,
        exact_final=args.exact_final,
    )
    ds = load_vectors(args.data)
    g, stats = build_graph_with_stats(ds, params)
    save_graph(g, args.out)
    print(f"Built {g.k_out}-NN graph over {g.count} points in {stats.seconds:.2f}s -> {args.out}")
    if args.truth is not None:
        report = RunReport(
            task="graph",
            params=params.to_dict(),
            recall=graph_recall(g, load_graph(args.truth)),
            seconds=stats.seconds,
            counters={
                "c1_slots_per_node": stats.c1_slots_per_node,
                "full_distance_evals": stats.full_distance_evals,
                "scratch_high_water": stats.scratch_high_water,
            },
            seed=params.seed,
            dataset=describe_dataset(ds, str(args.data)),
        )
        print(f"recall@{g.k_out} = {report.recall:.4f}")
        if args.report is not None:
            append_report(args.report, report)


def cmd_ground_truth(args) -> None:
    ds = load_vectors(args.data)
    if args.graph:
        k = args.k if args.k is not None else DEFAULT_K_OUT
        g = brute_force_graph(ds, k)
        save_graph(g, args.out)
        print(f"Wrote exact {k}-NN graph of {g.count} points to {args.out}")
        return
    if args.queries is None:
        raise ParameterError("ground-truth needs --queries (or --graph)")
    k = args.k if args.k is not None else DEFAULT_K
    truth = brute_force_knn(ds, load_vectors(args.queries), k)
    save_results(truth, args.out)
    print(f"Wrote exact {k}-NN of {truth.query_count} queries to {args.out}")


def cmd_eval(args) -> None:
    if args.graph:
        results, truth = load_graph(args.results), load_graph(args.truth)
        width = truth.k_out
    else:
        results, truth = load_results(args.results), load_results(args.truth)
        width = truth.k
    k = args.k if args.k is not None else width
    recall = recall_at_k(results, truth, k)
    print(f"recall@{k} = {recall:.4f}")
    if args.report is not None:
        append_report(
            args.report,
            RunReport(
                task="graph" if args.graph else "search",
                params={"results": str(args.results), "k": k},
                recall=recall,
                seconds=0.0,
            ),
        )


def cmd_sweep(args) -> None:
    with args.grid.open(encoding="utf-8") as fh:
        try:
            entries = json.load(fh)
        except json.JSONDecodeError as exc:
            raise HilbertForestError(f"Grid file {args.grid} is not valid JSON: {exc}") from None
    if not isinstance(entries, list):
        raise HilbertForestError(f"Grid file {args.grid} must hold a JSON list")
    grid = parse_grid(entries, "graph" if args.graph else "search")
    if args.graph:
        ds = load_vectors(args.data)
        reports = sweep_graph(ds, load_graph(args.truth), grid, str(args.data))
    else:
        if args.queries is None:
            raise ParameterError("A search sweep needs --queries")
        if args.index is not None:
            index = load_index(args.index)
        else:
            n_trees = max((p.n for p in grid), default=1)
            index = build_index(load_vectors(args.data), n_trees, leaf_size=args.leaf_size, seed=args.seed)
        truth = load_results(args.truth, index.count)
        reports = sweep_search(index, load_vectors(args.queries), truth, grid, str(args.data))
    for report in reports:
        append_report(args.report, report)
        print(f"{report.task} {json.dumps(report.params, sort_keys=True)} recall={report.recall:.4f}")


def _configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format=LOG_FORMAT)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one command.

    Returns:
        0 on success, 1 on a library or I/O error, 2 on a usage error
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    _configure_logging(args.verbose)
    try:
        if args.threads is not None:
            set_num_threads(args.threads)
        args.func(args)
    except HilbertForestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc.strerror or exc}: {exc.filename}" if exc.filename else f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        if args.threads is not None:
            set_num_threads(None)
    return 0


if __name__ == "__main__":
    sys.exit(main())
