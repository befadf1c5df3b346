"""Command line entry point: ``acsharp <experiment> --config FILE``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import AcsharpError
from .harness import EXPERIMENTS, ExperimentConfig, run_experiment

log = logging.getLogger("acsharp")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="acsharp", description="Stochastic Allen-Cahn interface experiments.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", required=True, help="YAML experiment config")
    p.add_argument("--root-seed", type=int, default=None, help="override the config root seed")
    p.add_argument("--out", default=None, help="output directory (defaults to the config's 'output')")
    p.add_argument("--dump-trajectories", action="store_true",
                   help="also write per-path checkpoints / trajectory CSVs")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.from_yaml(args.config)
        if cfg.experiment != args.experiment:
            cfg.experiment = args.experiment
            cfg.validate()
        if args.root_seed is not None:
            cfg.root_seed = args.root_seed
        out = args.out or cfg.output or f"runs/{cfg.experiment}"
        report = run_experiment(cfg, out, args.dump_trajectories)
    except AcsharpError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"out": str(out), "pass_fractions": report.pass_fractions,
                      "failures": len(report.failures)}, indent=2, default=str))
    return 1 if any(f.get("scope") == "experiment" for f in report.failures) else 0


if __name__ == "__main__":
    sys.exit(main())
