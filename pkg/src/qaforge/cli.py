"""Command-line entry point.

Each subcommand runs the pipeline through the named stage, reusing any
stage artifacts already present in the output directory:

    qaforge run --corpus docs/ --out out/ --mock-script script.jsonl
    qaforge ingest --corpus docs/ --out out/ --mock-script script.jsonl
    qaforge score --config run.json

Options given on the command line override values from ``--config``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from .errors import PipelineError
from .pipeline import STAGES, RunConfig, run

logger = logging.getLogger(__name__)

_STAGE_PREFIX = {stage: STAGES[: i + 1] for i, stage in enumerate(STAGES)}


def _add_options(parser: argparse.ArgumentParser) -> None:
    # Every option defaults to None so that "not given" is distinguishable
    # from "given the default value" when merging with a config file.
    parser.add_argument("--config", help="JSON file of run options")
    parser.add_argument("--corpus", dest="corpus_dir", help="directory of .md files")
    parser.add_argument("--out", dest="out_dir", help="output directory")
    parser.add_argument("--mock-script", help="scripted model responses (JSONL)")
    parser.add_argument(
        "--prechunked", help="skip chunking; read chunks from this JSONL file"
    )
    parser.add_argument("--chat-base-url")
    parser.add_argument("--chat-model")
    parser.add_argument("--embed-base-url")
    parser.add_argument("--embed-model")
    parser.add_argument(
        "--chunker", help="agentic | analytic | fixed:<tokens> (default agentic)"
    )
    parser.add_argument(
        "--fixed-chunk-size", type=int, nargs="?", const=2048,
        help="greedy token-budget chunking with no model calls "
        "(shorthand for --chunker fixed:<tokens>)",
    )
    parser.add_argument("--window-length", type=int)
    parser.add_argument("--window-overlap", type=int)
    parser.add_argument("--lam", type=float, help="segment-count penalty")
    parser.add_argument("--projection-dims", type=int)
    parser.add_argument("--cluster-eps", type=float)
    parser.add_argument("--cluster-min-pts", type=int)
    parser.add_argument("--mmr-lambda", type=float)
    parser.add_argument("--keywords-per-topic", type=int)
    parser.add_argument("--top-n", type=int)
    parser.add_argument("--keep-k", type=int)
    parser.add_argument("--max-iterations", type=int)
    parser.add_argument("--member-budget", type=int)
    parser.add_argument("--num-candidates", type=int)
    parser.add_argument("--difficulty-min", type=float)
    parser.add_argument("--target-count", type=int)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--question-threshold", type=float)
    parser.add_argument("--link-threshold", type=float)
    parser.add_argument("--merge-threshold", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--embedding-dim", type=int)
    parser.add_argument("--backoff-base", type=float)
    # ablations; store_true would erase config-file values, so use const
    parser.add_argument(
        "--no-multihop", action="store_const", const=True, default=None,
        help="contexts stay at their seed chunk",
    )
    parser.add_argument(
        "--no-verifier", action="store_const", const=True, default=None,
        help="accept every generated candidate",
    )
    parser.add_argument(
        "--no-persona", action="store_const", const=True, default=None,
        help="use generic domain/persona placeholders",
    )
    parser.add_argument(
        "--image-only", action="store_const", const=True, default=None,
        help="attach raw images, skip generated descriptions",
    )
    parser.add_argument(
        "--description-only", action="store_const", const=True, default=None,
        help="use generated descriptions, never attach images",
    )
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qaforge",
        description="build a verified multi-hop QA dataset from a markdown corpus",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        through = " → ".join(_STAGE_PREFIX[stage])
        stage_parser = sub.add_parser(stage, help=f"run stages {through}")
        _add_options(stage_parser)
    run_parser = sub.add_parser("run", help="run the full pipeline")
    _add_options(run_parser)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    if args.config:
        config = RunConfig.from_file(args.config)
    else:
        config = RunConfig()
    field_names = {f.name for f in dataclasses.fields(RunConfig)}
    for name, value in vars(args).items():
        if name in field_names and value is not None:
            setattr(config, name, value)
    if getattr(args, "fixed_chunk_size", None) is not None:
        config.chunker = f"fixed:{args.fixed_chunk_size}"
    return config


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    config = config_from_args(args)
    stages = STAGES if args.command == "run" else _STAGE_PREFIX[args.command]
    try:
        result = run(config, stages=stages)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    counts = json.dumps(result.manifest.counts, sort_keys=True)
    print(f"run {result.manifest.run_id} complete: {counts}")
    if "curate" in stages:
        print(f"dataset: {result.dataset_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
