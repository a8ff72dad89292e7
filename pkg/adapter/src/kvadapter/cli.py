"""kvx: export model caches/queries to KVC1, inject compacted caches."""
from __future__ import annotations

import argparse
import sys
from typing import List, Optional

from .extract import MODES, ExtractionSpec, export_cache, export_on_policy


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvx")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="extract cache + queries to KVC1")
    p.add_argument("--model", required=True)
    p.add_argument("--context-file", required=True)
    p.add_argument("--mode", default="repeat_prefill",
                   choices=[m for m in MODES])
    p.add_argument("--max-queries", type=int, default=50_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-new-tokens", type=int, default=32)
    p.add_argument("--heldout-fraction", type=float, default=0.0)
    p.add_argument("--heldout-output", default=None)
    p.add_argument("--compacted", default=None,
                   help="compacted container for on_policy mode")
    p.add_argument("--output", required=True)

    q = sub.add_parser("inject", help="generate from a compacted container")
    q.add_argument("--model", required=True)
    q.add_argument("--compact", required=True)
    q.add_argument("--prompt", required=True)
    q.add_argument("--max-new-tokens", type=int, default=50)

    return parser


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export":
            with open(args.context_file) as f:
                context = f.read().strip()
            spec = ExtractionSpec(
                model_path=args.model, context=context, mode=args.mode,
                max_queries_per_head=args.max_queries, seed=args.seed,
                max_new_tokens=args.max_new_tokens,
                heldout_fraction=args.heldout_fraction)
            if args.mode == "on_policy":
                if not args.compacted:
                    raise ValueError("on_policy mode needs --compacted")
                export_on_policy(spec, args.compacted, args.output)
            else:
                export_cache(spec, args.output,
                             heldout_path=args.heldout_output)
        else:
            from .extract import load_model
            from .inject import inject_and_generate
            model, tokenizer = load_model(args.model)
            text, _ = inject_and_generate(
                model, tokenizer, args.compact, prompt=args.prompt,
                max_new_tokens=args.max_new_tokens)
            print(text)
        return 0
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
