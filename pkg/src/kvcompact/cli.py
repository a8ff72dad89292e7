"""
Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 I/O error. Diagnostics go to
stderr; machine-readable output goes to files or stdout only. Every
subcommand is deterministic given its flags and seeds, independent of the
worker thread count.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from typing import List, Optional

import numpy as np

from . import budgets, container, metrics, synth
from .compaction import (ChunkPlan, CompactionConfig, compact_cache,
                         compact_chunked)

METHOD_ALIASES = {
    "omp": ("omp", None),
    "omp-fast": ("omp_fast", None),
    "hak": ("highest_attention", None),
    # hak-fast differs only in expected query provenance (metadata)
    "hak-fast": ("highest_attention", None),
    "selection-only": ("selection_only", None),
}


def _threads(args) -> Optional[int]:
    if getattr(args, "threads", None) is not None:
        return args.threads
    env = os.environ.get("KVC_THREADS")
    return int(env) if env else None


def _parse_head(text: str):
    layer, head = text.split(",")
    return int(layer), int(head)


def _parse_spans(text: str):
    spans = []
    for part in text.split(","):
        start, end = part.split(":")
        spans.append((int(start), int(end)))
    return spans


def _build_config(args) -> CompactionConfig:
    if args.method not in METHOD_ALIASES:
        raise ValueError(f"unknown method: {args.method!r}")
    method, _ = METHOD_ALIASES[args.method]
    return CompactionConfig(
        method=method, ratio=args.ratio, agg=args.agg,
        omp_k=args.omp_k, omp_tau=args.omp_refit,
        dtype_out=args.dtype).resolved()


def _load_schedule(spec: str) -> Optional[budgets.BudgetSchedule]:
    if spec == "uniform":
        return None
    with open(spec) as f:
        return budgets.schedule_from_json(f.read())


def _cmd_compact(args) -> int:
    manifest, cache = container.load_cache(args.input)
    queries = container.load_queries(args.queries or args.input)
    cfg = _build_config(args)
    schedule = _load_schedule(args.budget)
    compacted = compact_cache(cache, queries, cfg, schedule=schedule,
                              threads=_threads(args))
    container.save_compact(args.output, compacted, head_dim=manifest.head_dim,
                           rope=manifest.rope, dtype=args.dtype)
    return 0


def _cmd_chunk_compact(args) -> int:
    manifest, cache = container.load_cache(args.input)
    spans = _parse_spans(args.spans)
    plan = ChunkPlan(spans=spans, fixed_prefix_len=args.prefix_len,
                     fixed_suffix_len=args.suffix_len)
    query_files = args.queries or [args.input]
    if len(query_files) == 1:
        query_files = query_files * len(spans)
    if len(query_files) != len(spans):
        raise ValueError("need one --queries per span (or a single shared one)")
    chunk_queries = [container.load_queries(f) for f in query_files]
    cfg = _build_config(args)
    schedule = _load_schedule(args.budget)
    chunk_caches = None
    if args.mode == "text":
        if not args.chunk_cache or len(args.chunk_cache) != len(spans):
            raise ValueError("text mode needs one --chunk-cache per span")
        chunk_caches = [container.load_cache(f)[1] for f in args.chunk_cache]
    compacted = compact_chunked(
        cache, plan, chunk_queries, cfg, schedule=schedule,
        mode="kv_based" if args.mode == "kv" else "text_based",
        chunk_caches=chunk_caches)
    container.save_compact(args.output, compacted, head_dim=manifest.head_dim,
                           rope=manifest.rope, dtype=args.dtype,
                           chunk_spans=spans)
    return 0


def _cmd_budget(args) -> int:
    with open(args.curves) as f:
        curves = budgets.curves_from_json(f.read())
    schedule = budgets.allocate_budgets(curves, eta=args.eta, r0=args.r0)
    with open(args.output, "w") as f:
        f.write(budgets.schedule_to_json(schedule))
    return 0


def _cmd_sensitivity(args) -> int:
    _, cache = container.load_cache(args.input)
    queries = container.load_queries(args.queries or args.input)
    heldout = container.load_queries(args.heldout)
    grid = [float(x) for x in args.grid.split(",")]
    heads = [_parse_head(h) for h in args.head] if args.head \
        else sorted(cache)
    cfg = CompactionConfig(method="omp", ratio=args.baseline).resolved()
    curves = [budgets.measure_sensitivity(cache, queries, heldout, head,
                                          grid, args.baseline, cfg)
              for head in heads]
    with open(args.output, "w") as f:
        f.write(budgets.curves_to_json(curves))
    return 0


def _cmd_eval(args) -> int:
    _, original = container.load_cache(args.original)
    _, compacted = container.load_compact(args.compact)
    queries = container.load_queries(args.queries or args.original)
    reports = {}
    for key in sorted(original):
        if key not in compacted:
            raise ValueError(f"compacted container missing head {key}")
        reports[key] = metrics.reconstruction_report(
            original[key], compacted[key], queries[key].Q)
    doc = metrics.reports_to_json(reports)
    if args.output:
        with open(args.output, "w") as f:
            f.write(doc)
    else:
        print(doc)
    if args.csv:
        metrics.reports_to_csv(reports, args.csv)
    return 0


def _cmd_inspect(args) -> int:
    manifest, _ = container.read_container(args.file)
    print(container.canonical_json(manifest.to_dict()))
    return 0


def _cmd_synth(args) -> int:
    structure, clusters = synth.parse_structure(args.structure)
    cache, queries, heldout = synth.synth_cache(
        seed=args.seed, layers=args.layers, heads=args.heads, T=args.tokens,
        d=args.head_dim, n_queries=args.n_queries, structure=structure,
        clusters=clusters, n_heldout=args.n_heldout)
    container.save_cache(args.output, cache, queries)
    if args.heldout_output:
        if not heldout:
            raise ValueError("--heldout-output requires --n-heldout > 0")
        container.save_queries(args.heldout_output, heldout,
                               head_dim=args.head_dim)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvcompact",
        description="KV-cache compaction via attention matching")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_compact_flags(p):
        p.add_argument("--input", required=True)
        p.add_argument("--queries", action="append")
        p.add_argument("--ratio", type=float, default=1.0)
        p.add_argument("--method", default="omp",
                       choices=sorted(METHOD_ALIASES))
        p.add_argument("--budget", default="uniform")
        p.add_argument("--omp-k", type=int, default=None)
        p.add_argument("--omp-refit", type=int, default=None)
        p.add_argument("--agg", default="rms", choices=["mean", "rms", "max"])
        p.add_argument("--dtype", default="f32", choices=["f32", "bf16"])
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--output", required=True)

    p = sub.add_parser("compact", help="compact a cache container")
    add_compact_flags(p)
    p.set_defaults(func=_cmd_compact)

    p = sub.add_parser("chunk-compact", help="chunked compaction")
    add_compact_flags(p)
    p.add_argument("--spans", required=True,
                   help="comma-separated start:end token spans")
    p.add_argument("--mode", default="kv", choices=["kv", "text"])
    p.add_argument("--prefix-len", type=int, default=0)
    p.add_argument("--suffix-len", type=int, default=0)
    p.add_argument("--chunk-cache", action="append",
                   help="locally prefilled chunk container (text mode)")
    p.set_defaults(func=_cmd_chunk_compact)

    p = sub.add_parser("budget", help="allocate shares from curves")
    p.add_argument("--curves", required=True)
    p.add_argument("--r0", type=float, default=budgets.DEFAULT_R0)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--output", required=True)
    p.set_defaults(func=_cmd_budget)

    p = sub.add_parser("sensitivity", help="measure per-head curves")
    p.add_argument("--input", required=True)
    p.add_argument("--queries", default=None)
    p.add_argument("--heldout", required=True)
    p.add_argument("--head", action="append",
                   help="L,H (repeatable; default all heads)")
    p.add_argument("--grid", required=True)
    p.add_argument("--baseline", type=float, required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=_cmd_sensitivity)

    p = sub.add_parser("eval", help="reconstruction report")
    p.add_argument("--original", required=True)
    p.add_argument("--compact", required=True)
    p.add_argument("--queries", default=None)
    p.add_argument("--output", default=None)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("inspect", help="print a container manifest")
    p.add_argument("file")
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("synth", help="generate a synthetic cache container")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--tokens", type=int, default=64)
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--n-queries", type=int, default=128)
    p.add_argument("--n-heldout", type=int, default=0)
    p.add_argument("--structure", default="iid",
                   help='"iid" or "clustered:<c>"')
    p.add_argument("--output", required=True)
    p.add_argument("--heldout-output", default=None)
    p.set_defaults(func=_cmd_synth)

    return parser


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ValueError, container.ContainerError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
