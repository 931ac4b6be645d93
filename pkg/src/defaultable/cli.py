"""Command-line front end.

    defaultable run <config-file-or-preset> [--out DIR] [--seed N] [--paths N] [--reference]
    defaultable presets
    defaultable validate <config-file>

Exit codes: 0 all audits pass or complete, 2 an audit failed, 1 configuration
or runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import list_presets, load_config, preset_config
from .errors import ConfigError
from .runner import run_experiment


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="defaultable",
                                     description="defaultable-asset portfolio experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a config file or named preset")
    run_p.add_argument("config", help="path to a JSON config, or a preset name")
    run_p.add_argument("--out", default="out", help="output directory (default: ./out)")
    run_p.add_argument("--seed", type=int, default=None, help="override the master seed")
    run_p.add_argument("--paths", type=int, default=None, help="override the path count")
    run_p.add_argument("--reference", action="store_true",
                       help="single worker + compensated sums for bit-stable output")

    sub.add_parser("presets", help="list built-in presets")

    val_p = sub.add_parser("validate", help="validate a config file and exit")
    val_p.add_argument("config", help="path to a JSON config")
    return parser


def _resolve_config(arg: str):
    if os.path.exists(arg):
        return load_config(arg)
    return preset_config(arg)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "presets":
            for name, blurb in list_presets():
                print(f"{name:28s} {blurb}")
            return 0
        if args.command == "validate":
            load_config(args.config)
            print(f"{args.config}: valid")
            return 0
        cfg = _resolve_config(args.config)
        manifest = run_experiment(cfg, args.out, seed=args.seed, paths=args.paths,
                                  reference=args.reference)
        for name, verdict in manifest.verdicts.items():
            print(f"{name}: {verdict}")
        print(f"wrote {len(manifest.tables)} table(s), {len(manifest.plots)} plot(s) "
              f"to {args.out} (backend={manifest.kernel_backend})")
        return manifest.exit_code
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
