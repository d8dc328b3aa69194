"""Command-line interface.

Five subcommands cover the full workflow: ``generate`` simulated datasets,
``train`` one model on one dataset, ``evaluate`` a checkpoint, ``benchmark``
a whole sweep from a config file, and ``report`` aggregated results.
"""

from __future__ import annotations

import argparse
import json
import sys

import yaml

from .base import NodeForecaster, NssmForecaster, SubspaceForecaster
from .bench.grids import PROFILES
from .bench.report import write_report
from .bench.runner import load_config, run_benchmark
from .checkpoint import load_forecaster, save_forecaster
from .systems import builtin, generate, system_names
from .trajectory import load_csv, save_csv, split_thirds

_FAMILIES = {
    "node": NodeForecaster,
    "nssm": NssmForecaster,
    "lssm": SubspaceForecaster,
}


def _cmd_generate(args) -> int:
    spec = builtin(args.system)
    traj = generate(spec, n=args.n, delta=args.delta, seed=args.seed)
    save_csv(traj, args.out)
    print(
        json.dumps(
            {
                "system": args.system,
                "n_samples": traj.n_samples,
                "delta": traj.delta,
                "n_u": traj.n_u,
                "n_y": traj.n_y,
                "out": args.out,
            }
        )
    )
    return 0


def _cmd_train(args) -> int:
    params = {}
    if args.config:
        with open(args.config) as fh:
            params = yaml.safe_load(fh) or {}
        if not isinstance(params, dict):
            raise ValueError("train config must be a mapping of estimator settings")
    try:
        est = _FAMILIES[args.family](**params)
    except TypeError as e:
        raise ValueError(f"bad {args.family} config: {e}") from None
    split = split_thirds(load_csv(args.data))
    est.fit(split)
    save_forecaster(args.out, est)
    print(
        json.dumps(
            {
                "family": args.family,
                "train_mse": est.mse(split.train),
                "dev_mse": est.mse(split.dev),
                "test_mse": est.mse(split.test),
                "train_seconds": est.fit_time_,
                "checkpoint": args.out,
            }
        )
    )
    return 0


def _cmd_evaluate(args) -> int:
    est = load_forecaster(args.ckpt)
    traj = load_csv(args.data)
    print(
        json.dumps(
            {
                "mse": est.mse(traj),
                "n_samples": traj.n_samples,
                "forecast_rows": traj.n_samples - est.forecast_start_,
            }
        )
    )
    return 0


def _cmd_benchmark(args) -> int:
    cfg = load_config(
        args.config, profile=args.profile, jobs=args.jobs, seeds=args.seeds
    )
    stats = run_benchmark(cfg, resume=args.resume)
    stats["out_dir"] = cfg.out_dir
    print(json.dumps(stats))
    return 0


def _cmd_report(args) -> int:
    paths = write_report(args.results, args.out)
    print(json.dumps(paths))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sysid-bench",
        description="Benchmark forecasting models on simulated dynamical systems.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a built-in system to CSV")
    p.add_argument("--system", required=True, choices=system_names())
    p.add_argument("--n", required=True, type=int, help="number of samples")
    p.add_argument("--delta", type=float, default=None, help="sampling interval")
    p.add_argument("--seed", type=int, default=0, help="input-excitation seed")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="fit one model on one dataset")
    p.add_argument("--family", required=True, choices=sorted(_FAMILIES))
    p.add_argument("--data", required=True, help="input CSV path")
    p.add_argument("--config", default=None, help="YAML of estimator settings")
    p.add_argument("--out", required=True, help="checkpoint output path (.npz)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="open-loop error of a checkpoint on a CSV")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="input CSV path")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("benchmark", help="run a full sweep from a config file")
    p.add_argument("--config", required=True, help="YAML benchmark config")
    p.add_argument("--profile", choices=PROFILES, default=None)
    p.add_argument("--jobs", type=int, default=None, help="parallel workers")
    p.add_argument("--resume", action="store_true", help="skip completed trials")
    p.add_argument("--seeds", type=int, default=None, help="seeds per grid cell")
    p.set_defaults(func=_cmd_benchmark)

    p = sub.add_parser("report", help="aggregate a results directory")
    p.add_argument("--results", required=True, help="benchmark out_dir")
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
