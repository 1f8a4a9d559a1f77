"""Command-line experiment runner.

    perflod convergence|decay|poincare|solve --config <file> [overrides]

The JSON config mirrors ExperimentConfig; sizes accept "2^-p" or decimal
strings.  Exit codes: 0 success, 2 configuration error, 3 numerical
failure (including rows recorded as failed inside a sweep).
"""

from __future__ import annotations

import argparse
import json
import sys

from . import experiments
from .errors import ConfigurationError, NumericalError


def _build_parser():
    parser = argparse.ArgumentParser(prog="perflod", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in experiments.COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--geometry", help="geometry kind")
        p.add_argument("--eta", help="comma list of microstructure sizes (2^-p or decimal)")
        p.add_argument("--h", dest="h_fine", help="fine mesh size")
        p.add_argument("--H", dest="H_list", help="comma list of coarse sizes")
        p.add_argument("--k", help="truncation layers: integer or 'log'")
        p.add_argument("--k-list", help="comma list of layers (decay)")
        p.add_argument("--interp", choices=["projective", "clement"])
        p.add_argument("--forcing", choices=["step", "constant"])
        p.add_argument("--output", help="CSV output path")
        p.add_argument("--seed", type=int)
        p.add_argument("--cache-dir", help="directory for cached reference solves")
        p.add_argument("--paper-scale", action="store_true",
                       help="full-scale protocol: h=2^-8 and eta down to 2^-6")
    return parser


def _config_from_args(args):
    data = {}
    if args.config:
        try:
            with open(args.config) as f:
                data = json.load(f)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError("config must be a JSON object")

    if args.geometry:
        geo = data.get("geometry")
        geo = dict(geo) if isinstance(geo, dict) else {}
        geo["kind"] = args.geometry
        data["geometry"] = geo
    if args.eta:
        data["eta_list"] = args.eta.split(",")
    if args.h_fine:
        data["h_fine"] = args.h_fine
    if args.H_list:
        data["H_list"] = args.H_list.split(",")
    if args.k:
        data["k_policy"] = "log" if args.k == "log" else int(args.k)
    if args.k_list:
        data["k_list"] = [int(v) for v in args.k_list.split(",")]
    if args.interp:
        data["interp"] = args.interp
    if args.forcing:
        data["forcing"] = args.forcing
    if args.output:
        data["output"] = args.output
    if args.seed is not None:
        data["seed"] = args.seed
    if args.cache_dir:
        data["cache_dir"] = args.cache_dir

    cfg = experiments.config_from_dict(data, command=args.command)
    if args.paper_scale:
        cfg.h_fine = 2.0**-8
        if cfg.command == "decay":
            cfg.eta_list = [2.0**-6]
    if cfg.output is None:
        cfg.output = f"{cfg.command}.csv"
    return cfg


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _config_from_args(args)
        records, summary = experiments.run(cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    print(summary)
    print(f"wrote {len(records)} rows to {cfg.output}")
    if any(r.status != "ok" for r in records):
        failed = sum(r.status != "ok" for r in records)
        print(f"{failed} rows failed", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
