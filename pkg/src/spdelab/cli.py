"""``lab`` command line: run one experiment kind or assemble a report.

    lab <kind> --config <path> --seed <u64> --out <dir> [--check] [--workers N]
    lab report --out <dir> <manifests...>

Exit status: 0 success (and checks passed), 1 check failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import sys

from .experiments import KINDS, ConfigError, build_report, load_config, run_experiment

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def _seed(text):
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _run_parser():
    p = _Parser(prog="lab", description="Run an experiment kind from a TOML config.")
    p.add_argument("kind")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", required=True, type=_seed)
    p.add_argument("--out", required=True)
    p.add_argument("--check", action="store_true", help="exit 1 if any acceptance check fails")
    p.add_argument("--workers", type=int, default=1)
    return p


def _report_parser():
    p = _Parser(prog="lab report", description="Aggregate run manifests into CSV tables and SVG plots.")
    p.add_argument("--out", required=True)
    p.add_argument("manifests", nargs="*")
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    if argv and argv[0] == "report":
        args = _report_parser().parse_args(argv[1:])
        summary = build_report(args.out, args.manifests)
        for err in summary["errors"]:
            print(f"error: {err['manifest']}: {err['error']}", file=sys.stderr)
        print(json.dumps({"tables": [t["table"] for t in summary["tables"]], "errors": len(summary["errors"])}))
        return 0
    try:
        args = _run_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.kind not in KINDS:
        print(f"error: unknown experiment kind {args.kind!r}; expected one of {list(KINDS)}", file=sys.stderr)
        return 2
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        params = load_config(args.config)
        manifest = run_experiment(args.kind, params, args.seed, args.out, args.workers, args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    failed = [name for name, c in manifest["checks"].items() if not c["pass"]]
    for name, c in manifest["checks"].items():
        print(f"{'PASS' if c['pass'] else 'FAIL'} {args.kind}.{name}")
    if args.check and failed:
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
