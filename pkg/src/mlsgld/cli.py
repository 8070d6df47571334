"""Command-line entry points for the experiment suite.

Subcommands: gen-data, decay, mse, complexity, paths, mala.  All flags can
also be set from a TOML or JSON config file given with --config, whose
values take precedence over flags.  The exit code is 0 only if every
requested run converged.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

from .experiments import (
    ExperimentConfig,
    cmd_complexity,
    cmd_decay,
    cmd_gen_data,
    cmd_mala,
    cmd_mse,
    cmd_paths,
)

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

COMMANDS = {
    "gen-data": cmd_gen_data,
    "decay": cmd_decay,
    "mse": cmd_mse,
    "complexity": cmd_complexity,
    "paths": cmd_paths,
    "mala": cmd_mala,
}


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mlsgld",
        description="Multilevel SGLD experiment suite (CSV/JSON outputs).",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--model", choices=["logistic", "gaussian"])
        p.add_argument("--n-data", type=int, dest="n_data")
        p.add_argument("--dim", type=int)
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--m", type=int)
        p.add_argument("--h0", type=float)
        p.add_argument(
            "--variant",
            choices=["plain", "antithetic", "plain-avg", "antithetic-avg"],
        )
        p.add_argument("--estimator", help="full | subsample | taylor | switched(r)")
        p.add_argument("--window-fraction", type=float, dest="window_fraction")
        p.add_argument("--seed", type=int)
        p.add_argument("--levels", type=int)
        p.add_argument("--samples", type=int)
        p.add_argument("--eps-list", type=_float_list, dest="eps_list")
        p.add_argument("--reps", type=int)
        p.add_argument("--max-level", type=int, dest="max_level")
        p.add_argument("--pilot", type=int)
        p.add_argument("--n-list", type=_int_list, dest="complexity_n_list")
        p.add_argument("--complexity-seeds", type=int, dest="complexity_seeds")
        p.add_argument("--complexity-eps", type=float, dest="complexity_eps")
        p.add_argument("--steps", type=int, dest="mala_steps")
        p.add_argument("--burnin", type=int, dest="mala_burnin")
        p.add_argument("--mala-reps", type=int, dest="mala_reps")
        p.add_argument("--target-accept", type=float, dest="target_accept")
        p.add_argument("--threads", type=int)
        p.add_argument("--out")
        p.add_argument("--config", help="TOML or JSON file overriding the flags")
    return parser


def load_config_file(path: str) -> dict:
    raw = Path(path).read_bytes()
    if path.endswith(".json"):
        return json.loads(raw)
    return tomllib.loads(raw.decode())


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    names = {f.name for f in fields(ExperimentConfig)}
    values = {
        k: v for k, v in vars(args).items() if k in names and v is not None
    }
    if args.config:
        overrides = load_config_file(args.config)
        unknown = set(overrides) - names
        if unknown:
            raise SystemExit(f"unknown config keys: {sorted(unknown)}")
        values.update(overrides)
    return ExperimentConfig(**values)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = config_from_args(args)
    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ok = COMMANDS[args.command](config, out_dir)
    if not ok:
        print(f"{args.command}: some runs did not converge", file=sys.stderr)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
