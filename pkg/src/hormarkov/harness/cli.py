"""Command-line entry point: ``hormarkov <subcommand> [--config PATH] [--seed U64] [--threads N] [--out DIR]``.

Exit codes: 0 success, 2 validation error, 3 resource cap exceeded.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from ..errors import CapabilityError, ConfigError, ResourceCapError
from .config import default_config, load_config
from .experiments import FitError, run_experiment

SUBCOMMANDS = {
    "simulate": "simulate",
    "hormander": "hormander",
    "ibp-check": "ibp-check",
    "tv-rate": "kinetic-tv",
    "density": "density",
    "clt": "iterated-clt",
    "localization": "localization",
}

EXIT_OK, EXIT_VALIDATION, EXIT_RESOURCE = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hormarkov", description="Run builtin scheme experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, exp in SUBCOMMANDS.items():
        s = sub.add_parser(name, help=f"run the {exp!r} experiment")
        s.add_argument("--config", help="INI config file (defaults to the builtin configuration)")
        s.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        s.add_argument("--threads", type=int, help="worker threads for path blocks")
        s.add_argument("--out", help="output directory")
        s.add_argument("--n-paths", type=int, dest="n_paths", help="override run.n_paths")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    exp = SUBCOMMANDS[args.command]
    try:
        cfg = load_config(args.config, exp) if args.config else default_config(exp).validate()
        cfg = cfg.with_overrides(seed=args.seed, threads=args.threads, out=args.out, n_paths=args.n_paths)
        rep = run_experiment(cfg)
    except (ConfigError, CapabilityError, FitError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except ResourceCapError as e:
        print(f"resource cap: {e}", file=sys.stderr)
        return EXIT_RESOURCE
    print(json.dumps({"experiment": rep.experiment, "out": cfg.out, "summary_keys": sorted(rep.summary),
                      "rate_fit": rep.rate_fit}, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
