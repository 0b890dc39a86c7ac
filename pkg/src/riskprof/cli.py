"""Command line entry point: one subcommand per stage plus ``run-all``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Sequence

from . import __version__
from .config import STAGES, ConfigError, bundled_config_path, load_config
from .pipeline import OUT_DIR_ENV, MissingArtifactError, Pipeline, PipelineError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING = 3

_HELP = {
    "synth": "generate or load the patient cohort",
    "fit-predictor": "fit the aggregate and personalized forecasters",
    "attack": "craft adversarial cgm windows against the forecasters",
    "risk": "build per-patient risk profiles",
    "cluster": "cluster risk profiles and label vulnerability",
    "fit-detector": "train detectors under every training strategy",
    "evaluate": "score every detector on the shared test pool",
    "report": "write the Markdown report and plot data",
    "run-all": "run every stage in order, reusing cached stages",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (default: built-in defaults; 'bundled' for the shipped synthetic config)")
    common.add_argument("--out-dir", help=f"artifact root (default: ${OUT_DIR_ENV} or ./runs)")
    common.add_argument("--seed", type=int, help="root seed, overrides the config file")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-patient work (default 1)")
    common.add_argument("--force", action="store_true", help="recompute even when a cached stage is valid")
    common.add_argument("-v", "--verbose", action="store_true", help="log stage progress")

    parser = argparse.ArgumentParser(
        prog="riskprof",
        description="Per-patient attack risk scores, vulnerability clustering and selectively trained anomaly detectors for CGM glucose forecasters.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name in (*STAGES, "run-all"):
        sub.add_parser(name, parents=[common], help=_HELP[name], description=_HELP[name])
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {} if args.seed is None else {"seed": args.seed}
    path = bundled_config_path() if args.config == "bundled" else args.config
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        config = load_config(path, overrides)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_USAGE

    pipe = Pipeline(config, args.out_dir, jobs=args.jobs)
    try:
        if args.command == "run-all":
            records = pipe.run_all(force=args.force)
            last = records["report"]
        else:
            last = pipe.run(args.command, force=args.force)
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps({"stage": last.stage, "dir": str(last.path), "run": str(pipe.run_dir)}))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
