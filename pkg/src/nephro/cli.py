"""Command-line entry point: ``nephro <subcommand> [--config PATH] [--set k=v ...]``.

Exit status is 0 on success, 1 on validation or stage-order errors and 2
when a model backend could not be reached.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from nephro import pipeline
from nephro.config import check_config, load_config
from nephro.errors import NephroError, TransportError, ValidationError

EXIT_OK, EXIT_INVALID, EXIT_TRANSPORT = 0, 1, 2
COMMANDS = ("synth", "ingest", "charts", "teach", "predict", "baseline", "evaluate", "report", "run-all")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nephro", description="eGFR forecasting pipeline")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="run-config JSON (defaults apply to missing keys)")
    common.add_argument("--run-id", metavar="ID", help="overrides output.run_id")
    common.add_argument("--force", action="store_true", help="rerun stages whose outputs already exist")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, value parsed as JSON when possible (repeatable)")
    common.add_argument("--eval-steps", type=int, metavar="K", help="score the last K steps (student.eval_steps)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "synth": "generate a synthetic cohort",
        "ingest": "load the cohort CSV named by cohort.csv_path",
        "charts": "render prefix chart series",
        "teach": "teacher interpretations with evaluator selection",
        "predict": "student sessions for every ablation cell",
        "baseline": "fit and apply the baselines",
        "evaluate": "compute evaluation rows",
        "report": "write report.csv, report.md, plots and cards",
        "run-all": "run every stage in order, skipping completed ones",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def _configure_logging(verbose: bool) -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    for noisy in ("httpx", "httpcore", "matplotlib", "PIL"):
        logging.getLogger(noisy).setLevel(logging.WARNING)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    log = logging.getLogger("nephro.cli")
    try:
        overrides = list(args.overrides)
        if args.eval_steps is not None:
            overrides.append(f"student.eval_steps={args.eval_steps}")
        config = load_config(args.config, overrides)
        if args.run_id:
            config["output"]["run_id"] = args.run_id
            check_config(config)
        ctx = pipeline.Context.create(config)
        try:
            if args.command == "run-all":
                results = pipeline.run_all(ctx, args.force)
            else:
                results = [pipeline.run_stage(ctx, args.command, args.force)]
        finally:
            ctx.gateway.close()
    except TransportError as exc:
        log.error("transport failure: %s", exc)
        return EXIT_TRANSPORT
    except (ValidationError, NephroError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    failures = sum(r.transport_failures for r in results)
    if failures:
        log.error("%d backend request(s) failed after retries; see eval_rows.json for failed cells", failures)
        return EXIT_TRANSPORT
    print(ctx.run.path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
