"""Command-line front end: ``clocknet run | validate | presets``."""

from __future__ import annotations

import argparse
import json
import sys
import warnings

from . import __version__
from .scenario import PRESETS, ScenarioError, parse_scenario, run


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="clocknet", description=__doc__)
    ap.add_argument("--version", action="version", version=f"clocknet {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario file or a preset name")
    p_run.add_argument("scenario", help="path to a TOML scenario, or a preset name")
    p_run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p_run.add_argument("--out", default=None, help="output directory (default: $CLOCKNET_OUT or ./results)")
    p_run.add_argument("--format", choices=("csv", "json", "both"), default=None)
    p_run.add_argument("--quiet", action="store_true", help="do not print the summary")

    p_val = sub.add_parser("validate", help="check a scenario without running it")
    p_val.add_argument("scenario")
    p_val.add_argument("--normalized", action="store_true", help="print the normalized scenario")

    sub.add_parser("presets", help="list built-in scenarios")
    return ap


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "presets":
        for name in PRESETS:
            print(name)
        return 0
    try:
        cfg = parse_scenario(args.scenario)
        if args.command == "validate":
            print(cfg.to_toml() if args.normalized else f"ok: {cfg.mode} scenario {cfg.name or ''}".rstrip())
            return 0
        if args.seed is not None:
            if args.seed < 0:
                print("error: --seed must be >= 0", file=sys.stderr)
                return 3
            cfg.seed = args.seed
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            record = run(cfg, out_dir=args.out, fmt=args.format)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    if not args.quiet:
        summary = {k: v["value"] for k, v in record.outputs.items()}
        print(json.dumps(summary, indent=2, default=str))
        for f in record.files:
            print(f"wrote {f}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
