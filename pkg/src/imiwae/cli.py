"""Command line entry point.

Errors are printed to stderr as one JSON object
``{"error": <type>, "message": ..., "problems": [...]}`` and mapped to exit
codes: 2 configuration or usage, 3 input data, 4 numerical failure,
1 anything else raised by the package.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .datagen import fit_standardizer, load_csv
from .evaluation import cross_validate_kappa1
from .exceptions import (AggregationError, CalibrationError, ConfigError, DomainError, IMIWAEError,
                         NumericError, ParseError, ShapeError, SpecError, TrainingError)
from .experiments import (PRESETS, aggregate, impute_csv, load_model, preset, resolve_config,
                          run_experiment, save_model, _standardized)
from .imputer import ImputeConfig, generate
from .model import ModelConfig
from .datagen import write_csv
from .theory import THEORY_CHECKS, run_theory_check
from .trainer import TrainConfig, train

EXIT_CODES = [
    ((ConfigError, SpecError, AggregationError), 2),
    ((ParseError, ShapeError, DomainError, FileNotFoundError), 3),
    ((NumericError, TrainingError, CalibrationError), 4),
    ((IMIWAEError,), 1),
]


def _emit_error(exc) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        payload["problems"] = exc.problems
    print(json.dumps(payload), file=sys.stderr)
    for types, code in EXIT_CODES:
        if isinstance(exc, types):
            return code
    return 1


def _parse_int_list(text):
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")


def cmd_run(args):
    if args.preset:
        config = preset(args.preset)
    elif args.config:
        try:
            with open(args.config) as fh:
                config = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{args.config}: invalid JSON ({exc})"]) from None
    else:
        raise ConfigError(["give a config path or --preset"])
    if args.output_dir:
        config["output_dir"] = args.output_dir
    if args.replications is not None:
        config["replications"] = args.replications
    if args.dry_run:
        print(json.dumps(resolve_config(config), indent=2))
        return 0
    report = run_experiment(config)
    out = Path(report["config"]["output_dir"]) / f"{report['name']}.json"
    print(json.dumps({"report": str(out), "aggregate": report["aggregate"]}, indent=2))
    return 0


def cmd_aggregate(args):
    rows = aggregate(args.reports, args.out)
    if args.out is None:
        w = csv.DictWriter(sys.stdout, fieldnames=["metric", "n", "mean", "sd", "reports"])
        w.writeheader()
        w.writerows(rows)
    return 0


def cmd_impute(args):
    _, res = impute_csv(args.model, args.data, args.out, args.mode, args.B, args.seed, args.missing_token)
    diag = res.diagnostics()
    print(json.dumps({"out": args.out, "rows": diag["rows"], "imputed_rows": diag["imputed_rows"],
                      "ess_min": diag["ess_min"]}))
    return 0


def cmd_train(args):
    table = load_csv(args.data, missing_token=args.missing_token)
    stats = fit_standardizer(table)
    mc = ModelConfig(p=table.p, latent_dim=args.kappa1, missing_latent_dim=args.kappa2,
                     hidden=args.hidden, missingness=args.missingness)
    tc = TrainConfig(batch_size=args.batch_size, lr=args.lr, max_epochs=args.epochs, seed=args.seed,
                     progress_every=args.progress)
    params, trace = train(_standardized(table, stats), mc, tc)
    save_model(args.out, params, stats, table.columns)
    print(json.dumps({"model": args.out, "epochs": trace.epochs, "final_loss": trace.loss[-1]}))
    return 0


def cmd_generate(args):
    params, stats, columns = load_model(args.model)
    values = generate(params, args.n, args.seed).values
    if stats is not None:
        values = stats.inverse(values)
    write_csv(args.out, values, columns)
    print(json.dumps({"out": args.out, "rows": args.n}))
    return 0


def cmd_verify_theory(args):
    names = [args.check] if args.check else list(THEORY_CHECKS)
    results = {}
    ok = True
    for name in names:
        rep = run_theory_check(name, seed=args.seed)
        results[name] = rep.to_dict()
        ok &= rep.passed
        print(f"{name}: {'PASS' if rep.passed else 'FAIL'}", file=sys.stderr)
    text = json.dumps(results, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0 if ok else 5


def cmd_cv(args):
    table = load_csv(args.data, missing_token=args.missing_token)
    report = cross_validate_kappa1(
        table, args.kappa1, folds=args.folds, mask_fraction=args.mask_fraction, seed=args.seed,
        model_config={"hidden": args.hidden},
        train_config=TrainConfig(max_epochs=args.epochs, batch_size=args.batch_size, seed=args.seed),
        impute_config=ImputeConfig(B=args.B))
    d = report.to_dict()
    d.pop("fold_rmse", None)
    print(json.dumps(d, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="imiwae", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config or preset")
    p.add_argument("config", nargs="?")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--output-dir")
    p.add_argument("--replications", type=int)
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("aggregate", help="pool replication metrics of several reports")
    p.add_argument("reports", nargs="*")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_aggregate)

    p = sub.add_parser("impute", help="fill missing cells of a CSV with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("mnar", "mar"), default="mnar")
    p.add_argument("--B", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--missing-token")
    p.set_defaults(fn=cmd_impute)

    p = sub.add_parser("train", help="fit a model to a CSV and save it")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kappa1", type=int, default=3)
    p.add_argument("--kappa2", type=int, default=1)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--missingness", choices=("linear", "nonlinear"), default="linear")
    p.add_argument("--epochs", type=int, default=10000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--progress", type=int, default=0, help="print progress every N epochs")
    p.add_argument("--missing-token")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="sample rows from a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("verify-theory", help="run the Monte Carlo and oracle checks")
    p.add_argument("--check", choices=THEORY_CHECKS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_verify_theory)

    p = sub.add_parser("cv", help="cross-validate the data latent dimension on a CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--kappa1", type=_parse_int_list, required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--mask-fraction", type=float, default=0.2)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--B", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--missing-token")
    p.set_defaults(fn=cmd_cv)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (IMIWAEError, FileNotFoundError) as exc:
        return _emit_error(exc)


if __name__ == "__main__":
    sys.exit(main())
