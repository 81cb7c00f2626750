"""Command-line entry point.

Exit codes: 0 on success, 2 on configuration/validation errors, 3 on
numerical failures (solver non-convergence, certification failure, singular
matrices, non-finite states).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .experiments import COMMANDS, ConfigError, cmd_report, run_command
from .parabolic import EllipticityError, SolverConvergenceError
from .zvonkin import CertificationError, InversionError

_NUMERICAL_ERRORS = (
    SolverConvergenceError,
    EllipticityError,
    CertificationError,
    InversionError,
    FloatingPointError,
    np.linalg.LinAlgError,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="snl",
        description="Numerical laboratory for singular-drift SDEs in mixed-norm settings",
    )
    parser.add_argument("--version", action="version", version=f"snl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} scenario from a config file")
        p.add_argument("--config", required=True, help="TOML config file")
        p.add_argument("--out", default="runs/latest", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads for MC loops")

    rep = sub.add_parser("report", help="merge the CSV outputs of a run directory")
    rep.add_argument("run_dir", help="directory containing manifests")
    rep.add_argument("--out", default=None, help="output directory (default: run_dir)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            out = Path(args.out) if args.out else Path(args.run_dir)
            out.mkdir(parents=True, exist_ok=True)
            cmd_report(Path(args.run_dir), out)
        else:
            run_command(args.command, args.config, args.out, args.seed, args.threads)
    except ConfigError as exc:
        print(f"snl: config error: {exc}", file=sys.stderr)
        return 2
    except _NUMERICAL_ERRORS as exc:
        print(f"snl: numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
