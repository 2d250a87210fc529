"""Command line entry point: ``rcpred <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from .core import ConfigError, DataError, NumericalError, ObservationTable, child_seed
from .eval import dr_mse, estimates_to_csv
from .experiment import (EXPERIMENT_METHODS, coverage_study, fit_method, read_config,
                         read_results, run_experiment, summarize, summary_to_csv,
                         summary_to_text)
from .modelio import load_model, model_filename, save_model
from .synth import generate

log = logging.getLogger("rcpred")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _split_overrides(extra: List[str]) -> Dict[str, str]:
    """Turn leftover ``--section.key value`` / ``--section.key=value`` tokens into a dict."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise ConfigError(f"unrecognised argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {tok} needs a value")
            value = extra[i + 1]
            i += 2
        out[key] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rcpred",
        description="Counterfactual prediction under runtime confounding: learners, "
                    "doubly-robust evaluation and simulation studies.",
        epilog="Any config key may be overridden as --section.key VALUE.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="INI configuration file")
        p.add_argument("--seed", type=int, help="base seed (overrides [experiment] seed)")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--treatment", type=int, choices=(0, 1), help="target treatment a")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("--method", help=f"one of {', '.join(EXPERIMENT_METHODS)}")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("simulate", help="draw a synthetic dataset and its oracle sidecar")
    common(p)
    p.add_argument("--n", type=int, help="rows to draw (default: [experiment] train_n)")

    p = sub.add_parser("fit", help="train a method on a CSV table")
    common(p)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("evaluate", help="doubly-robust MSE of a saved model on a CSV table")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)

    p = sub.add_parser("experiment", help="run a simulation sweep")
    common(p)

    p = sub.add_parser("coverage", help="coverage study of the DR error estimate")
    common(p)

    p = sub.add_parser("report", help="summarise a results.csv")
    common(p)
    p.add_argument("--results", type=Path, help="results file (default: OUT/results.csv)")
    return parser


def _load_config(args, overrides):
    overrides = dict(overrides)
    if args.seed is not None:
        overrides["experiment.seed"] = str(args.seed)
    if args.treatment is not None:
        overrides["experiment.treatment"] = str(args.treatment)
    return read_config(args.config, overrides)


def _read_table(path: Path) -> ObservationTable:
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    return ObservationTable.from_csv(path)


def cmd_simulate(args, config) -> None:
    n = args.n or config.train_n
    ds = generate(config.dgp_for(None, n, config.seed))
    args.out.mkdir(parents=True, exist_ok=True)
    ds.table.to_csv(args.out / "data.csv", comment=ds.config.describe())
    (args.out / "oracle.csv").write_text(ds.sidecar_csv())
    log.info("wrote %d rows to %s", n, args.out)


def cmd_fit(args, config) -> None:
    method = (args.method or "DR").upper()
    if method not in EXPERIMENT_METHODS:
        raise ConfigError(f"unknown method {method!r}")
    table = _read_table(args.data)
    model = fit_method(method, table, config, child_seed(config.seed, 7))
    if method == "JOINT":
        model, est = model
        (args.out / "joint_mse.csv").parent.mkdir(parents=True, exist_ok=True)
        (args.out / "joint_mse.csv").write_text(estimates_to_csv([est]))
    args.out.mkdir(parents=True, exist_ok=True)
    path = save_model(model, args.out / model_filename(model))
    log.info("saved %s model to %s", method, path)


def cmd_evaluate(args, config) -> None:
    table = _read_table(args.data)
    if not args.model.exists():
        raise DataError(f"model file not found: {args.model}")
    model = load_model(args.model)
    est = dr_mse(table, model, config.treatment, config.specs.pi, config.specs.eta_spec,
                 config.clip_epsilon, child_seed(config.seed, 11), method=model.method)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "mse.csv").write_text(estimates_to_csv([est]))
    print(f"{est.method}: {est.point:.4f} ({est.ci_lo:.4f}, {est.ci_hi:.4f}) n={est.n}")


def cmd_experiment(args, config) -> None:
    rows = run_experiment(config, args.out, jobs=args.jobs)
    print(summary_to_text(summarize(rows)), end="")


def cmd_coverage(args, config) -> None:
    report = coverage_study(config, args.out, jobs=args.jobs)
    for m in report.methods:
        print(f"{m}: true={report.true_error[m]:.3f} covered={report.covered[m]}/"
              f"{report.simulations} ranked lowest={report.lowest[m]}")


def cmd_report(args, config) -> None:
    path = args.results or args.out / "results.csv"
    if not path.exists():
        raise DataError(f"results file not found: {path}")
    summary = summarize(read_results(path))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "summary.csv").write_text(summary_to_csv(summary))
    (args.out / "summary.txt").write_text(summary_to_text(summary))
    print(summary_to_text(summary), end="")


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "evaluate": cmd_evaluate,
            "experiment": cmd_experiment, "coverage": cmd_coverage, "report": cmd_report}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        config = _load_config(args, _split_overrides(extra))
        COMMANDS[args.command](args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
