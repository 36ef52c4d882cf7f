#!/usr/bin/env python3
"""Command-line entry point: train, translate, eval-ppl, gradcheck, bench, ablate, generate."""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from config import Config
from srnmt.errors import GradCheckFailure, GradientExplosion, SrnmtError
from srnmt.reporting import ablation_table, bench_rows, bench_table
from srnmt_toolkit import SrnmtToolkit, load_run_config

logger = logging.getLogger("srnmt")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srnmt", description="Weakly-recurrent NMT toolkit")
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    parser.add_argument("--log-level", default=Config.LOG_LEVEL, help="logging level (default: %(default)s)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", help="train a model and write the best checkpoint")

    translate = sub.add_parser("translate", help="decode an input file line by line")
    translate.add_argument("--input", required=True)
    translate.add_argument("--output", required=True)
    translate.add_argument("--checkpoint")
    translate.add_argument("--beam", type=int)
    translate.add_argument("--max-len", type=int)

    ppl = sub.add_parser("eval-ppl", help="perplexity of a checkpoint on a parallel corpus")
    ppl.add_argument("--checkpoint")
    ppl.add_argument("--src")
    ppl.add_argument("--tgt")

    grad = sub.add_parser("gradcheck", help="central-difference check of every parameter gradient")
    grad.add_argument("--tolerance", type=float, default=1e-4)
    grad.add_argument("--vocab", type=int, default=11)
    grad.add_argument("--length", type=int, default=4)
    grad.add_argument("--d", type=int, default=8)
    grad.add_argument("--layers", type=int, default=2)

    bench = sub.add_parser("bench", help="forward and training throughput, SR versus LSTM")
    bench.add_argument("--widths", type=int, nargs="+", default=[256])
    bench.add_argument("--layers", type=int, nargs="+", default=[1, 2, 3, 4])
    bench.add_argument("--seq-lens", type=int, nargs="+", default=[64])
    bench.add_argument("--kinds", nargs="+", choices=["sr", "lstm"], default=["sr", "lstm"])
    bench.add_argument("--batch", type=int, default=32)
    bench.add_argument("--warmup", type=int, default=Config.BENCH_WARMUP)
    bench.add_argument("--repeats", type=int, default=Config.BENCH_REPEATS)
    bench.add_argument("--csv", help="also write the machine rows to this file")

    sub.add_parser("ablate", help="single-stage training of all eight component combinations")

    generate = sub.add_parser("generate", help="write a synthetic task corpus")
    generate.add_argument("--out-dir", required=True)
    return parser


def configure_logging(level: str):
    logging.basicConfig(format="[%(levelname)s] %(message)s", level=getattr(logging, level.upper(), logging.INFO),
                        stream=sys.stderr, force=True)


def run(args: argparse.Namespace) -> int:
    overrides = list(args.overrides)
    if getattr(args, "checkpoint", None):
        overrides.append(f"checkpoint={args.checkpoint}")
    toolkit = SrnmtToolkit(load_run_config(args.config, overrides, args.seed))

    if args.command == "train":
        result = toolkit.train()
        print(f"status={result.status} best_ppl={result.best_ppl:.4f} steps={result.steps}")
        return Config.EXIT_NUMERICAL if result.status == "failed_to_converge" else Config.EXIT_OK

    if args.command == "translate":
        count = toolkit.translate(args.input, args.output, args.beam, args.max_len)
        print(f"translated {count} lines -> {args.output}")
        return Config.EXIT_OK

    if args.command == "eval-ppl":
        print(f"ppl={toolkit.eval_ppl(args.src, args.tgt):.4f}")
        return Config.EXIT_OK

    if args.command == "gradcheck":
        report = toolkit.gradcheck(args.tolerance, args.vocab, args.length, d=args.d, n_layers=args.layers)
        for result in report.results:
            print(f"{'ok  ' if result.passed else 'FAIL'} {result.parameter:<40} {result.max_rel_error:.3e}")
        if not report.passed:
            raise GradCheckFailure(
                f"gradient check failed: worst {report.worst_parameter} at {report.worst_error:.3e} "
                f"(tolerance {report.tolerance:g})",
                worst_parameter=report.worst_parameter,
            )
        return Config.EXIT_OK

    if args.command == "bench":
        report = toolkit.bench(args.widths, args.layers, args.seq_lens, args.kinds, args.batch,
                               args.warmup, args.repeats)
        print(bench_table(report))
        rows = bench_rows(report)
        print("\n".join(rows))
        if args.csv:
            Path(args.csv).write_text("\n".join(rows) + "\n", encoding="utf-8")
        return Config.EXIT_OK

    if args.command == "ablate":
        print(ablation_table(toolkit.ablate()))
        return Config.EXIT_OK

    if args.command == "generate":
        for key, path in toolkit.generate(args.out_dir).items():
            print(f"{key} = {path}")
        return Config.EXIT_OK

    raise SrnmtError(f"unknown command {args.command}")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return Config.EXIT_OK if exc.code == 0 else Config.EXIT_CONFIG
    configure_logging(args.log_level)
    try:
        return run(args)
    except (GradCheckFailure, GradientExplosion) as exc:
        logger.error("%s", exc)
        return Config.EXIT_NUMERICAL
    except (SrnmtError, OSError) as exc:
        logger.error("%s", exc)
        return Config.EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
