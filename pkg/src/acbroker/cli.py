"""Command-line front-end.

    acbroker solve      --config cfg.json [--out DIR] [--grid N] [--threads K]
    acbroker search     ... (same flags)
    acbroker sweep      ...
    acbroker percentile ...
    acbroker mc         ...

Environment overrides: ACBROKER_OUT and ACBROKER_THREADS substitute for the
--out/--threads flags when those are not given.  On failure the process
prints a machine-readable error JSON and exits with status 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import ConfigError
from .experiments import load_config, run

_SUBCOMMAND_KINDS = {
    "solve": {"solve"},
    "search": {"search"},
    "sweep": {"sweep2d", "kappa0_sweep"},
    "percentile": {"percentile"},
    "mc": {"montecarlo"},
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="acbroker",
        description="Brokerage contract and client-portfolio solver")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _SUBCOMMAND_KINDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--grid", type=int, default=None, help="grid cells")
        p.add_argument("--threads", type=int, default=None, help="worker threads")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    out = args.out if args.out is not None else os.environ.get("ACBROKER_OUT")
    threads = args.threads
    if threads is None and os.environ.get("ACBROKER_THREADS"):
        threads = int(os.environ["ACBROKER_THREADS"])
    try:
        config = load_config(args.config)
        if config.kind not in _SUBCOMMAND_KINDS[args.command]:
            raise ConfigError(
                f"config kind {config.kind!r} does not match subcommand "
                f"{args.command!r}")
        output = run(config, out_dir=out, grid_size=args.grid, threads=threads)
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports all failures
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stdout)
        return 1
    print(json.dumps({"out": str(output.out_dir), "rows": len(output.rows),
                      "results": str(output.results_csv)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
