"""Command-line entry point.

Subcommands map one-to-one onto the package's analyses:

    solve          transcribe and solve a preset or configured problem
    trim           solve a trim triple for the two-body model
    sop            steady-state trim optimization under the preset's cost
    nco-check      solve, then report optimality-system residuals
    turnpike-scan  horizon sweep with dwell measures
    dissipativity  constant-storage dissipation certificate

All artifact-producing commands write under --out (default ./out).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .app import (
    ExperimentConfig,
    PRESETS,
    KeplerParams,
    kepler_model,
    run,
)
from .ocp import solve_sop
from .trim import solve_trim


def _base_config(args: argparse.Namespace) -> ExperimentConfig:
    if getattr(args, "config", None):
        doc = json.loads(Path(args.config).read_text())
        config = ExperimentConfig.from_dict(doc)
    else:
        config = ExperimentConfig()
    if getattr(args, "preset", None):
        config.preset = args.preset
    if getattr(args, "out", None):
        config.out_dir = args.out
    if getattr(args, "tol", None) is not None:
        config.tol = args.tol
    if getattr(args, "max_iter", None) is not None:
        config.max_iter = args.max_iter
    return config


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="experiment configuration JSON file")
    parser.add_argument("--preset", help="named preset (see `solve --list`)")
    parser.add_argument("--out", help="output directory (default ./out)")
    parser.add_argument("--tol", type=float, help="solver KKT tolerance")
    parser.add_argument("--max-iter", type=int, dest="max_iter", help="solver iteration cap")


def _run_or_exit(config: ExperimentConfig) -> int:
    try:
        return run(config)
    except KeyError as exc:
        print(f"error: unknown preset {config.preset!r}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="trimoc",
                                     description="trajectory optimization with trim manifolds")
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="solve a preset or configured problem")
    _add_common(p_solve)
    p_solve.add_argument("--tocp", action="store_true",
                         help="also solve the reduced problem on the trim manifold")
    p_solve.add_argument("--nco-check", action="store_true", dest="nco_check",
                         help="report optimality residuals along the solution")
    p_solve.add_argument("--list", action="store_true", help="list presets and exit")

    p_trim = sub.add_parser("trim", help="solve a trim triple on the two-body model")
    p_trim.add_argument("--s", type=float, help="shape radius (fixed when given)")
    p_trim.add_argument("--v-th", type=float, dest="v_th", help="cyclic rate (fixed when given)")
    p_trim.add_argument("--guess", type=float, default=1.0)
    p_trim.add_argument("--out", help="write trim.json under this directory")

    p_sop = sub.add_parser("sop", help="steady-state trim optimization")
    _add_common(p_sop)

    p_nco = sub.add_parser("nco-check", help="solve plus optimality-residual report")
    _add_common(p_nco)
    p_nco.add_argument("--tocp", action="store_true",
                       help="include the reduced-problem correspondence")

    p_scan = sub.add_parser("turnpike-scan", help="horizon sweep with dwell measures")
    _add_common(p_scan)
    p_scan.add_argument("--horizons", default="30,60,90",
                        help="comma-separated horizon list")
    p_scan.add_argument("--epsilon", type=float, default=0.1)

    p_diss = sub.add_parser("dissipativity", help="dissipation certificate")
    _add_common(p_diss)

    args = parser.parse_args(argv)

    if args.command == "solve":
        if args.list:
            for name in sorted(PRESETS) + ["custom"]:
                print(name)
            return 0
        config = _base_config(args)
        config.tocp = args.tocp
        config.nco_check = args.nco_check
        return _run_or_exit(config)

    if args.command == "trim":
        model = kepler_model()
        try:
            if args.s is not None and args.v_th is not None:
                point = solve_trim(model, {"s": args.s, "v_th": args.v_th,
                                           "u": [None, 0.0]}, guess=args.guess)
            elif args.s is not None:
                point = solve_trim(model, {"s": args.s, "u": np.zeros(2)}, guess=args.guess)
            else:
                print("error: trim requires --s (and optionally --v-th)", file=sys.stderr)
                return 2
        except Exception as exc:  # solver failures carry their residual
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(point.to_json())
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "trim.json").write_text(point.to_json())
        return 0

    if args.command == "sop":
        config = _base_config(args)
        config.sop = True
        return _run_or_exit(config)

    if args.command == "nco-check":
        config = _base_config(args)
        config.nco_check = True
        config.tocp = args.tocp
        return _run_or_exit(config)

    if args.command == "turnpike-scan":
        config = _base_config(args)
        config.turnpike_horizons = [float(t) for t in args.horizons.split(",")]
        config.turnpike_epsilon = args.epsilon
        return _run_or_exit(config)

    if args.command == "dissipativity":
        config = _base_config(args)
        config.dissipativity = True
        return _run_or_exit(config)

    parser.error(f"unknown command {args.command!r}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
