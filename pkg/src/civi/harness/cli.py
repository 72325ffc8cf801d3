"""Command-line entry point: ``civi <command> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .. import sivi
from ..solver import ConfigError
from . import io
from .config import build_config, load_config
from .experiments import ExperimentAborted, run_config, run_recurrence
from .recurrence import RecurrenceCase

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default, help="master seed")
    parser.add_argument("--iters", type=int, default=default, help="override schedule.T")
    parser.add_argument(
        "--deterministic",
        action="store_true",
        default=argparse.SUPPRESS if suppress else False,
        help="zero the wall-clock column so reruns are byte-identical",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="civi", description="CI-VI experiments and checks")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        return p

    p = add("toy", "fit a semi-implicit model to a 2-d toy density")
    p.add_argument("--target", required=True, choices=sivi.TOY_KINDS)
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, required=True)

    p = add("blr", "Bayesian logistic regression against a Metropolis reference")
    p.add_argument("--data", type=Path, help="headerless CSV, label last; synthetic data when omitted")
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, required=True)

    p = add("bias-rate", "decay of the gradient-estimate error on the lognormal fixture")
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path)

    p = add("gradcheck", "tape gradients against finite differences")
    p.add_argument("--trials", type=int)
    p.add_argument("--out", type=Path)

    p = add("recurrence", "iterate the step-size recurrence and check its bound")
    p.add_argument("--case", type=Path, required=True)

    p = add("rerun", "re-run the config stored in a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = add("make-data", "write a synthetic logistic-regression CSV")
    p.add_argument("--N", type=int, default=200)
    p.add_argument("--D", type=int, default=2)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _summary(report: dict) -> dict:
    """Drop bulky arrays before printing."""
    skip = {"trajectory", "theta", "samples", "mcmc_samples", "per_rep"}
    return {k: v for k, v in report.items() if k not in skip}


def _overrides(args) -> dict:
    return {
        "seed": args.seed,
        "schedule.T": args.iters,
        "deterministic": True if args.deterministic else None,
        "out": str(args.out) if getattr(args, "out", None) is not None else None,
    }


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "recurrence":
        verdict = run_recurrence(RecurrenceCase.from_yaml(args.case))
        print(json.dumps(verdict, indent=2))
        return EXIT_OK if verdict["holds"] else EXIT_CHECK_FAILED
    if cmd == "make-data":
        seed = 0 if args.seed is None else args.seed
        sivi.write_blr_csv(args.out, sivi.synthetic_blr(args.N, args.D, seed))
        return EXIT_OK
    ov = _overrides(args)
    if cmd == "rerun":
        doc = io.load_manifest(args.manifest)
        raw = doc["config"]
        raw["out"] = None
        cfg = build_config(raw, **ov)
    else:
        extra = {}
        if cmd == "toy":
            extra["target"] = args.target
        elif cmd == "blr" and args.data is not None:
            extra["data"] = str(args.data)
        elif cmd == "gradcheck" and args.trials is not None:
            extra["gradcheck.trials"] = args.trials
        config_path = getattr(args, "config", None)
        if config_path is not None:
            cfg = load_config(config_path, cmd, **ov, **extra)
        else:
            cfg = build_config({}, cmd, **ov, **extra)
    report = run_config(cfg)
    print(json.dumps(_summary(report), indent=2, default=_default))
    if cfg.experiment == "gradcheck" and not report["passed"]:
        return EXIT_CHECK_FAILED
    return EXIT_OK


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    return str(o)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"civi: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ExperimentAborted as exc:
        where = f" (last checkpoint: {exc.checkpoint})" if exc.checkpoint else ""
        print(f"civi: {exc}{where}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
