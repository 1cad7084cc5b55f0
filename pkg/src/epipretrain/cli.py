"""Command line entry point.

    epipretrain run <config> [--model.D 32 ...]
    epipretrain synth <spec> --seed N [--out DIR]
    epipretrain sweep <config> --fractions 0.6 0.8 1.0
    epipretrain plot <results_dir>

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _parse_overrides(extra: list[str]) -> dict[str, str]:
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ValueError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise ValueError(f"override {tok} needs a value")
            i += 1
            val = extra[i]
        out[key] = val
        i += 1
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="epipretrain", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="pre-train, fine-tune and evaluate one experiment")
    r.add_argument("config")

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("spec")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", default=None, help="output directory (default: next to the spec)")

    w = sub.add_parser("sweep", help="data-fraction sweep")
    w.add_argument("config")
    w.add_argument("--fractions", type=float, nargs="+", required=True)

    pl = sub.add_parser("plot", help="render figures for a results directory")
    pl.add_argument("results_dir")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from .config import ConfigError, load_config

    try:
        overrides = _parse_overrides(extra)
        if overrides and args.command not in ("run", "sweep"):
            raise ValueError(f"field overrides are not accepted by {args.command}")
        if args.command in ("run", "sweep"):
            cfg = load_config(args.config, overrides)
        elif args.command == "synth":
            from .synthetic import SyntheticCorpusSpec

            spec = SyntheticCorpusSpec.from_yaml(args.spec)
    except (ConfigError, ValueError, TypeError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "run":
            from .harness import run

            results = run(cfg)
            for seed, res in sorted(results.items()):
                print(f"seed {seed}: avg RMSE {res.avg_rmse:.6g} over {len(res.records)} predictions")
        elif args.command == "synth":
            from .synthetic import generate_synthetic

            out = Path(args.out) if args.out else Path(args.spec).with_suffix("")
            root = os.environ.get("EPIPRETRAIN_OUTPUT_ROOT")
            if root and not args.out:
                out = Path(root) / out.name
            print(generate_synthetic(spec, args.seed, out))
        elif args.command == "sweep":
            from .harness import sweep_data_fraction

            for row in sweep_data_fraction(cfg, args.fractions):
                print(f"fraction {row['fraction']:g} seed {row['seed']}: avg RMSE {row['avg_rmse']:.6g} {row['flag']}")
        elif args.command == "plot":
            from .plots import emit_plots

            for path in emit_plots(args.results_dir):
                print(path)
    except Exception as exc:  # noqa: BLE001
        logging.getLogger("epipretrain").debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
