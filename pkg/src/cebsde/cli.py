"""Command-line entry point: ``cebsde CONFIG [-o DIR] [--seed S] [-v]``.

Exit status: 0 pass, 1 task failure or task error, 2 config error,
3 hypothesis not verified on the instance.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigParseError, ConfigValidationError
from .report import run_experiment

CONFIG_ERROR = 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cebsde",
                                description="Run one conditional-expectation BSDE experiment.")
    p.add_argument("config", help="path to a TOML experiment file")
    p.add_argument("-o", "--output-dir", default=None,
                   help="directory for the CSV tables and summary.json (default: output.dir)")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("-v", "--verbose", action="count", default=0,
                   help="-v for progress, -vv for per-iteration residuals")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except ConfigValidationError as exc:
        for key, msg in exc.problems:
            print(f"config error: {key}: {msg}", file=sys.stderr)
        return CONFIG_ERROR
    except (ConfigParseError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return CONFIG_ERROR
    if args.seed is not None:
        cfg.seed = args.seed
    outdir = args.output_dir or cfg.output_dir
    logging.getLogger(__name__).info("running %s (config %s)", cfg.task, cfg.sha256[:12])
    bundle = run_experiment(cfg)
    paths = bundle.write(outdir)
    for name, verdict in bundle.verdicts.items():
        print(f"{name}: {verdict}")
    if bundle.error is not None:
        print(f"error: {bundle.error['type']}: {bundle.error['message']}", file=sys.stderr)
    print(f"status: {bundle.status} ({len(paths)} files in {outdir})")
    return bundle.exit_code


if __name__ == "__main__":
    sys.exit(main())
