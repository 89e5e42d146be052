"""Experiment configurations, presets, replication orchestration and report
aggregation.

A config is a JSON object with a ``kind`` and optional sections; every
missing field is filled from the documented defaults and the fully resolved
config is echoed into the report, so a report alone is enough to rerun it.
"""
from __future__ import annotations

import copy
import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import (DataTable, GaussianMixtureSpec, LatentFactorSpec, Standardizer, fit_standardizer,
                      gen_gaussian_mixture, gen_latent_factor_data, load_csv, write_csv)
from .evaluation import (column_mean_impute, cross_validate_kappa1, imputation_rmse,
                         mean_estimate_with_ci, median_bandwidth, mmd_squared, subsample_rows)
from .exceptions import AggregationError, ConfigError, IMIWAEError
from .imputer import ImputeConfig, generate, impute
from .missingness import MissingnessSpec, apply_mechanism
from .model import ModelConfig, ModelParams, load_checkpoint, save_checkpoint
from .nn import derive_seed, make_rng
from .theory import THEORY_CHECKS, run_theory_check
from .trainer import TrainConfig, train

KINDS = ("simulate-impute", "mixture-mean", "cv-select", "theory", "impute-csv", "generate")
WORKERS_ENV = "IMIWAE_WORKERS"
REPORT_FORMAT = "imiwae-run-report/1"


# --------------------------------------------------------------------------
# defaults and validation
# --------------------------------------------------------------------------

def _dataclass_defaults(cls, drop=()):
    out = {}
    for f in fields(cls):
        if f.name in drop:
            continue
        if f.default is not f.default_factory:     # plain default
            out[f.name] = f.default
    return out


def _defaults(kind):
    model = _dataclass_defaults(ModelConfig, drop=("p",))
    train_d = _dataclass_defaults(TrainConfig)
    imp = _dataclass_defaults(ImputeConfig)
    miss = _dataclass_defaults(MissingnessSpec)
    miss["target_rate"] = list(miss["target_rate"])
    latent_data = {"source": "latent_factor", "n": 5000, "p": 3, "latent_dim": 3,
                   "noise_std": 0.1, "hidden": 8, "coef_scale": 1.0}
    base = {"kind": kind, "name": kind, "replications": 1, "seed": 0, "output_dir": "runs"}
    if kind == "simulate-impute":
        base.update(data=latent_data, missingness=miss, model=model, train=train_d, impute=imp,
                    eval={"mmd_per_side": 2000, "untrained_baseline": True,
                          "untrained_B": 1000, "save_model": False})
    elif kind == "mixture-mean":
        base.update(data={"n": 20000}, model=model, train=train_d, impute=imp,
                    eval={"bootstrap_reps": 1000, "generated_n": None})
    elif kind == "cv-select":
        base.update(data=dict(latent_data, n=2000), missingness=miss, model=model,
                    train=dict(train_d, max_epochs=300, batch_size=128), impute=dict(imp, B=1000),
                    cv={"candidates": [1, 2, 3], "folds": 5, "mask_fraction": 0.2})
    elif kind == "theory":
        base.update(checks=list(THEORY_CHECKS), overrides={})
    elif kind == "impute-csv":
        base.update(data={"path": None, "missing_token": None, "header": None},
                    model_path=None, model=model, train=train_d, impute=imp,
                    out=None)
    elif kind == "generate":
        base.update(model_path=None, n=1000, out=None)
    return base


def _merge(defaults, given, path, problems):
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if k not in defaults:
            problems.append(f"{path}{k}: unknown key")
            continue
        if isinstance(defaults[k], dict) and k not in ("overrides",):
            if not isinstance(v, dict):
                problems.append(f"{path}{k}: expected an object")
                continue
            out[k] = _merge(defaults[k], v, f"{path}{k}.", problems)
        else:
            out[k] = v
    return out


def _check(problems, label, fn):
    try:
        return fn()
    except (IMIWAEError, TypeError, ValueError) as exc:
        problems.append(f"{label}: {exc}")
        return None


def resolve_config(config: dict) -> dict:
    """Fill defaults and validate; raises :class:`ConfigError` listing every
    problem found."""
    problems = []
    if not isinstance(config, dict):
        raise ConfigError(["config must be a JSON object"])
    kind = config.get("kind")
    if kind not in KINDS:
        raise ConfigError([f"kind: expected one of {', '.join(KINDS)}, got {kind!r}"])
    cfg = _merge(_defaults(kind), config, "", problems)

    if not isinstance(cfg["replications"], int) or isinstance(cfg["replications"], bool) \
            or cfg["replications"] < 1:
        problems.append("replications: must be an integer >= 1")
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool) or cfg["seed"] < 0:
        problems.append("seed: must be a nonnegative integer")
    if not isinstance(cfg["name"], str) or not cfg["name"]:
        problems.append("name: must be a nonempty string")

    if "model" in cfg:
        p = cfg["data"].get("p", 3) if kind in ("simulate-impute", "cv-select") else 3
        _check(problems, "model", lambda: ModelConfig.from_dict({**cfg["model"], "p": p}))
    if "train" in cfg:
        _check(problems, "train", lambda: TrainConfig.from_dict(cfg["train"]))
    if "impute" in cfg:
        _check(problems, "impute", lambda: ImputeConfig.from_dict(cfg["impute"]))
    if "missingness" in cfg:
        _check(problems, "missingness", lambda: MissingnessSpec.from_dict(cfg["missingness"]))
    if kind in ("simulate-impute", "cv-select"):
        d = cfg["data"]
        if d.get("source") != "latent_factor":
            problems.append("data.source: only 'latent_factor' is supported")
        _check(problems, "data", lambda: _latent_spec(d, 0))
    if kind == "simulate-impute":
        e = cfg["eval"]
        if not isinstance(e["mmd_per_side"], int) or e["mmd_per_side"] < 2:
            problems.append("eval.mmd_per_side: must be an integer >= 2")
    if kind == "mixture-mean":
        _check(problems, "data", lambda: GaussianMixtureSpec(n=cfg["data"]["n"]))
        if cfg["eval"]["bootstrap_reps"] < 100:
            problems.append("eval.bootstrap_reps: must be >= 100")
    if kind == "cv-select":
        c = cfg["cv"]
        if not c["candidates"] or any(not isinstance(k, int) or k < 1 for k in c["candidates"]):
            problems.append("cv.candidates: need a nonempty list of positive integers")
        elif max(c["candidates"]) > cfg["data"]["p"]:
            problems.append(f"cv.candidates: values above p={cfg['data']['p']}")
        if not isinstance(c["folds"], int) or c["folds"] < 2:
            problems.append("cv.folds: must be an integer >= 2")
        if not 0 < c["mask_fraction"] <= 0.5:
            problems.append("cv.mask_fraction: must lie in (0, 0.5]")
    if kind == "theory":
        bad = [c for c in cfg["checks"] if c not in THEORY_CHECKS]
        if bad:
            problems.append(f"checks: unknown {bad}; choose from {list(THEORY_CHECKS)}")
        if not isinstance(cfg["overrides"], dict):
            problems.append("overrides: expected an object")
    if kind == "impute-csv":
        if not cfg["data"]["path"]:
            problems.append("data.path: required")
        if not cfg["out"]:
            problems.append("out: required")
    if kind == "generate":
        if not cfg["model_path"]:
            problems.append("model_path: required")
        if not isinstance(cfg["n"], int) or cfg["n"] < 1:
            problems.append("n: must be an integer >= 1")
        if not cfg["out"]:
            problems.append("out: required")
    if problems:
        raise ConfigError(problems)
    return cfg


def _latent_spec(d, seed):
    return LatentFactorSpec(n=d["n"], p=d["p"], latent_dim=d["latent_dim"], noise_std=d["noise_std"],
                            hidden=d["hidden"], coef_scale=d["coef_scale"], seed=seed)


# --------------------------------------------------------------------------
# presets
# --------------------------------------------------------------------------

PRESETS = {
    # latent-variable MNAR, linear mechanism, 3-d nonlinear data; desk scale:
    # n 5000, 1000 epochs, 10 replications, batch 128, float32
    "table1-linear-latent": {
        "kind": "simulate-impute", "name": "table1-linear-latent", "replications": 10, "seed": 2024,
        "data": {"n": 5000, "p": 3, "latent_dim": 3},
        "missingness": {"mechanism": "latent", "linearity": "linear", "target_rate": [0.30, 0.40]},
        "model": {"latent_dim": 3, "missing_latent_dim": 1, "hidden": 128, "encoder_layers": 2,
                  "decoder_layers": 2, "missingness": "linear", "n_importance": 20, "dtype": "float32"},
        "train": {"batch_size": 128, "lr": 1e-3, "max_epochs": 1000, "early_stopping": False},
        "impute": {"B": 10000, "mode": "mnar"},
        "eval": {"mmd_per_side": 2000, "untrained_baseline": True},
    },
    # eight-pattern Gaussian mixture, n 20000, 2000 epochs, 10 replications
    "mixture-mean": {
        "kind": "mixture-mean", "name": "mixture-mean", "replications": 10, "seed": 2024,
        "data": {"n": 20000},
        "model": {"latent_dim": 3, "missing_latent_dim": 1, "hidden": 64, "encoder_layers": 1,
                  "decoder_layers": 1, "missingness": "linear", "n_importance": 20, "dtype": "float32"},
        "train": {"batch_size": 256, "lr": 1e-3, "max_epochs": 2000, "early_stopping": False},
        "impute": {"B": 1000, "mode": "mnar"},
        "eval": {"bootstrap_reps": 1000},
    },
    # latent dimension selection, candidates 1 and 3, 10 seeds
    "cv-select": {
        "kind": "cv-select", "name": "cv-select", "replications": 10, "seed": 2024,
        "data": {"n": 2000, "p": 3, "latent_dim": 3},
        "missingness": {"mechanism": "latent", "linearity": "linear", "target_rate": [0.30, 0.40]},
        "model": {"missing_latent_dim": 1, "hidden": 64, "encoder_layers": 1, "decoder_layers": 1,
                  "dtype": "float32"},
        "train": {"batch_size": 128, "max_epochs": 300, "early_stopping": False},
        "impute": {"B": 1000},
        "cv": {"candidates": [1, 3], "folds": 5, "mask_fraction": 0.2},
    },
    "theory-all": {"kind": "theory", "name": "theory-all", "replications": 1, "seed": 2024},
}


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError([f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}"])
    return copy.deepcopy(PRESETS[name])


# --------------------------------------------------------------------------
# replications
# --------------------------------------------------------------------------

def replication_seed(base_seed: int, rep: int) -> int:
    return derive_seed(base_seed, rep)


def _standardized(table: DataTable, stats: Standardizer) -> DataTable:
    return DataTable(stats.transform(table.values), table.mask, table.columns, dict(table.meta))


def _rep_simulate_impute(cfg, rep_seed):
    seeds = {"data": derive_seed(rep_seed, 1), "missingness": derive_seed(rep_seed, 2),
             "train": derive_seed(rep_seed, 3), "impute": derive_seed(rep_seed, 4),
             "generate": derive_seed(rep_seed, 5), "mmd": derive_seed(rep_seed, 6)}
    full = gen_latent_factor_data(_latent_spec(cfg["data"], seeds["data"]))
    mspec = MissingnessSpec.from_dict({**cfg["missingness"], "seed": seeds["missingness"]})
    masked = apply_mechanism(full, mspec)
    kept, dropped = masked.drop_fully_missing()
    stats = fit_standardizer(kept)
    train_table = _standardized(kept, stats)
    mc = ModelConfig.from_dict({**cfg["model"], "p": kept.p})
    tc = TrainConfig.from_dict({**cfg["train"], "seed": seeds["train"]})
    params, trace = train(train_table, mc, tc)
    ic = ImputeConfig.from_dict({**cfg["impute"], "seed": seeds["impute"]})
    filled = impute(params, train_table, ic)
    truth = train_table.values
    rmse = imputation_rmse(truth, filled.values, kept.mask)
    rmse_raw = imputation_rmse(kept.values, stats.inverse(filled.values), kept.mask)
    metrics = {
        "rmse": rmse, "rmse_original_scale": rmse_raw,
        "rmse_mean_imputation": imputation_rmse(truth, column_mean_impute(train_table), kept.mask),
        "missing_rate": float(kept.missing_rate()),
        "missing_rate_all_rows": float(masked.missing_rate()),
        "offset": float(masked.meta["offset"]), "dropped_rows": int(dropped),
        "final_loss": float(trace.loss[-1]), "epochs": trace.epochs, "steps": trace.steps,
        "ess_min": float(filled.ess[kept.mask.min(axis=1) == 0].min()),
        "ess_median": float(np.median(filled.ess[kept.mask.min(axis=1) == 0])),
    }
    ev = cfg["eval"]
    if ev["untrained_baseline"]:
        init = ModelParams.init(mc, make_rng(seeds["train"], 0))
        init.trained_steps = -1     # deliberate baseline; silences the untrained warning
        base = impute(init, train_table, ImputeConfig.from_dict(
            {**cfg["impute"], "B": ev["untrained_B"], "seed": seeds["impute"]}))
        metrics["rmse_untrained"] = imputation_rmse(truth, base.values, kept.mask)
    m = ev["mmd_per_side"]
    full_std = stats.transform(full.values)
    order = make_rng(seeds["mmd"], 0).permutation(full.n)
    ref = full_std[order[:m]]
    gen = generate(params, m, seeds["generate"]).values
    complete_rows = kept.mask.min(axis=1) == 1
    obs = subsample_rows(train_table.values[complete_rows], m, seeds["mmd"])
    metrics["mmd_generated"] = mmd_squared(gen, ref)
    metrics["mmd_observed"] = mmd_squared(obs, ref)
    metrics["mmd_bandwidth"] = median_bandwidth(gen, ref)
    if full.n >= 2 * m:
        metrics["mmd_null"] = mmd_squared(full_std[order[m:2 * m]], ref)
    extra = {"params": params} if ev.get("save_model") else {}
    return metrics, seeds, {**extra, "stats": stats}


def _rep_mixture_mean(cfg, rep_seed):
    seeds = {"data": derive_seed(rep_seed, 1), "train": derive_seed(rep_seed, 3),
             "impute": derive_seed(rep_seed, 4), "generate": derive_seed(rep_seed, 5),
             "bootstrap": derive_seed(rep_seed, 7)}
    spec = GaussianMixtureSpec(n=cfg["data"]["n"], seed=seeds["data"])
    table = gen_gaussian_mixture(spec)
    truth = float(spec.true_mean()[2])
    kept, dropped = table.drop_fully_missing()
    stats = fit_standardizer(kept)
    mc = ModelConfig.from_dict({**cfg["model"], "p": 3})
    tc = TrainConfig.from_dict({**cfg["train"], "seed": seeds["train"]})
    params, trace = train(_standardized(kept, stats), mc, tc)
    ic = ImputeConfig.from_dict({**cfg["impute"], "seed": seeds["impute"]})
    # every row, the fully missing ones included, enters the population estimate
    std_all = DataTable(np.where(table.mask == 1, stats.transform(table.values), 0.0), table.mask)
    filled = stats.inverse(impute(params, std_all, ic).values)
    filled = np.where(table.mask == 1, table.values, filled)
    reps = cfg["eval"]["bootstrap_reps"]
    est_imp = mean_estimate_with_ci(filled[:, 2], reps, seeds["bootstrap"])
    n_gen = cfg["eval"]["generated_n"] or table.n
    gen = stats.inverse(generate(params, n_gen, seeds["generate"]).values)
    est_gen = mean_estimate_with_ci(gen[:, 2], reps, derive_seed(seeds["bootstrap"], 1))
    cc_rows = table.mask.min(axis=1) == 1
    cc = float(table.values[cc_rows, 2].mean())
    avail = float(table.values[table.mask[:, 2] == 1, 2].mean())
    metrics = {
        "truth": truth, "estimate_imputed": est_imp.estimate,
        "ci_imputed_low": est_imp.ci_low, "ci_imputed_high": est_imp.ci_high,
        "estimate_generated": est_gen.estimate,
        "ci_generated_low": est_gen.ci_low, "ci_generated_high": est_gen.ci_high,
        "estimate_complete_case": cc, "estimate_available_case": avail,
        "abs_error_imputed": abs(est_imp.estimate - truth),
        "abs_error_generated": abs(est_gen.estimate - truth),
        "abs_error_complete_case": abs(cc - truth),
        "abs_error_available_case": abs(avail - truth),
        "imputed_beats_complete_case": bool(abs(est_imp.estimate - truth) < abs(cc - truth)),
        "truth_in_ci_imputed": est_imp.covers(truth), "truth_in_ci_generated": est_gen.covers(truth),
        "fully_missing_rows": int(dropped), "complete_rows": int(cc_rows.sum()),
        "raw_prob_sum": float(table.meta.get("raw_prob_sum", float("nan"))),
        "final_loss": float(trace.loss[-1]), "epochs": trace.epochs, "steps": trace.steps,
    }
    return metrics, seeds, {}


def _rep_cv_select(cfg, rep_seed):
    seeds = {"data": derive_seed(rep_seed, 1), "missingness": derive_seed(rep_seed, 2),
             "cv": derive_seed(rep_seed, 8)}
    full = gen_latent_factor_data(_latent_spec(cfg["data"], seeds["data"]))
    masked = apply_mechanism(full, MissingnessSpec.from_dict({**cfg["missingness"],
                                                              "seed": seeds["missingness"]}))
    kept, _ = masked.drop_fully_missing()
    data = DataTable(np.where(kept.mask == 1, kept.values, np.nan), kept.mask)
    c = cfg["cv"]
    model = {k: v for k, v in cfg["model"].items() if k != "latent_dim"}
    report = cross_validate_kappa1(
        data, c["candidates"], folds=c["folds"], mask_fraction=c["mask_fraction"], seed=seeds["cv"],
        model_config=model, train_config=TrainConfig.from_dict(cfg["train"]),
        impute_config=ImputeConfig.from_dict(cfg["impute"]))
    metrics = {f"cv_rmse_k{k}": v for k, v in report.mean_rmse.items()}
    metrics["selected"] = report.selected
    metrics["selected_elbow"] = report.selected_elbow
    return metrics, seeds, {"cv": report.to_dict()}


def _rep_theory(cfg, rep_seed):
    metrics, details = {}, {}
    for name in cfg["checks"]:
        rep = run_theory_check(name, seed=derive_seed(rep_seed, THEORY_CHECKS.index(name)),
                               **cfg["overrides"].get(name, {}))
        metrics[f"{name}_passed"] = bool(rep.passed)
        details[name] = rep.to_dict()
    return metrics, {"theory": rep_seed}, {"checks": details}


_REPLICATION = {"simulate-impute": _rep_simulate_impute, "mixture-mean": _rep_mixture_mean,
                "cv-select": _rep_cv_select, "theory": _rep_theory}


def _run_one(args):
    cfg, rep = args
    rep_seed = replication_seed(cfg["seed"], rep)
    t0 = time.perf_counter()
    metrics, seeds, extra = _REPLICATION[cfg["kind"]](cfg, rep_seed)
    record = {"replication": rep, "seed": rep_seed, "seeds": seeds, "metrics": metrics,
              "wall_time": time.perf_counter() - t0}
    if "cv" in extra:
        record["cv"] = extra["cv"]
    if "checks" in extra:
        record["checks"] = extra["checks"]
    return record, extra


def _numeric(v):
    return isinstance(v, (bool, int, float, np.integer, np.floating)) and not isinstance(v, str)


def summarize(records) -> dict:
    """Mean, SD and count of every numeric metric over replication records."""
    values = {}
    for r in records:
        for k, v in r["metrics"].items():
            if _numeric(v) and v is not None:
                values.setdefault(k, []).append(float(v))
    out = {}
    for k, vs in values.items():
        a = np.asarray(vs)
        out[k] = {"n": len(a), "mean": float(a.mean()),
                  "sd": float(a.std(ddof=1)) if len(a) > 1 else 0.0}
    return out


def _workers():
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError([f"{WORKERS_ENV}: expected an integer, got {raw!r}"]) from None


def run_experiment(config: dict, replications=None, write=True, keep_models=False) -> dict:
    """Run a resolved or partial config and return the report dict.

    ``replications`` restricts the run to a subset of replication indices;
    each replication depends only on the config and its index, so a subset
    reproduces the corresponding records of a full run.
    """
    cfg = resolve_config(config)
    kind = cfg["kind"]
    if kind in ("impute-csv", "generate"):
        return _run_file_task(cfg, write)
    idx = list(range(cfg["replications"])) if replications is None else list(replications)
    t0 = time.perf_counter()
    jobs = [(cfg, i) for i in idx]
    workers = min(_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    records = [r for r, _ in results]
    report = {"format": REPORT_FORMAT, "version": __version__, "kind": kind, "name": cfg["name"],
              "config": cfg, "replications": records, "aggregate": summarize(records),
              "wall_time": time.perf_counter() - t0}
    if keep_models:
        report["_extras"] = [e for _, e in results]
    if write:
        write_report(report, Path(cfg["output_dir"]) / f"{cfg['name']}.json")
    return report


def write_report(report: dict, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    clean = {k: v for k, v in report.items() if not k.startswith("_")}
    with open(path, "w") as fh:
        json.dump(clean, fh, indent=2, default=_json_default)
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def load_report(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def metrics_only(report: dict) -> list:
    """Per-replication metrics, the part that must be bit-reproducible."""
    return [{"replication": r["replication"], "seed": r["seed"], "metrics": r["metrics"]}
            for r in report["replications"]]


# --------------------------------------------------------------------------
# file tasks: impute a CSV, sample from a saved model
# --------------------------------------------------------------------------

def save_model(path, params: ModelParams, stats: Standardizer, columns=None):
    save_checkpoint(path, params, {"standardizer": stats.to_dict(), "columns": columns})


def load_model(path):
    params, extra = load_checkpoint(path, with_extra=True)
    st = extra.get("standardizer")
    stats = Standardizer(np.asarray(st["mean"]), np.asarray(st["std"])) if st else None
    return params, stats, extra.get("columns")


def impute_csv(model_path, data_path, out_path, mode="mnar", B=10000, seed=0, missing_token=None):
    """Impute a CSV with a saved model; writes the completed CSV and an ESS
    sidecar ``<out>.ess.json``."""
    params, stats, _ = load_model(model_path)
    table = load_csv(data_path, missing_token=missing_token, drop_fully_missing=False)
    if stats is None:
        stats = fit_standardizer(table.drop_fully_missing()[0])
    std = DataTable(np.where(table.mask == 1, stats.transform(np.nan_to_num(table.values)), 0.0),
                    table.mask, table.columns)
    res = impute(params, std, ImputeConfig(B=B, mode=mode, seed=seed))
    values = np.where(table.mask == 1, table.values, stats.inverse(res.values))
    write_csv(out_path, values, table.columns)
    with open(str(out_path) + ".ess.json", "w") as fh:
        json.dump(res.diagnostics(), fh)
    return values, res


def _run_file_task(cfg, write):
    t0 = time.perf_counter()
    if cfg["kind"] == "generate":
        params, stats, columns = load_model(cfg["model_path"])
        values = generate(params, cfg["n"], cfg["seed"]).values
        if stats is not None:
            values = stats.inverse(values)
        write_csv(cfg["out"], values, columns)
        metrics = {"rows": int(cfg["n"])}
    else:
        d = cfg["data"]
        model_path = cfg["model_path"]
        if model_path is None:
            table = load_csv(d["path"], missing_token=d["missing_token"], header=d["header"])
            stats = fit_standardizer(table)
            mc = ModelConfig.from_dict({**cfg["model"], "p": table.p})
            tc = TrainConfig.from_dict({**cfg["train"], "seed": derive_seed(cfg["seed"], 3)})
            params, _ = train(_standardized(table, stats), mc, tc)
            model_path = str(Path(cfg["output_dir"]) / f"{cfg['name']}.model.json")
            Path(cfg["output_dir"]).mkdir(parents=True, exist_ok=True)
            save_model(model_path, params, stats, table.columns)
        ic = cfg["impute"]
        _, res = impute_csv(model_path, d["path"], cfg["out"], ic["mode"], ic["B"],
                            derive_seed(cfg["seed"], 4), d["missing_token"])
        metrics = {"rows": int(len(res.values)), "imputed_rows": res.diagnostics()["imputed_rows"],
                   "model_path": model_path}
    report = {"format": REPORT_FORMAT, "version": __version__, "kind": cfg["kind"], "name": cfg["name"],
              "config": cfg, "replications": [{"replication": 0, "seed": cfg["seed"], "seeds": {},
                                               "metrics": metrics}],
              "aggregate": summarize([{"metrics": metrics}]), "wall_time": time.perf_counter() - t0}
    if write:
        write_report(report, Path(cfg["output_dir"]) / f"{cfg['name']}.json")
    return report


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------

def aggregate(report_paths, out_path=None) -> list:
    """Pool replication records of several reports of the same kind.

    Returns rows ``{"metric", "n", "mean", "sd", "reports"}``; writes them as
    CSV when ``out_path`` is given.
    """
    report_paths = list(report_paths)
    if not report_paths:
        raise AggregationError("no reports to aggregate")
    reports = [load_report(p) if not isinstance(p, dict) else p for p in report_paths]
    kinds = {r.get("kind") for r in reports}
    if len(kinds) != 1:
        raise AggregationError(f"reports mix experiment kinds: {sorted(map(str, kinds))}")
    records = [rec for r in reports for rec in r["replications"]]
    stats = summarize(records)
    rows = [{"metric": k, "n": v["n"], "mean": v["mean"], "sd": v["sd"], "reports": len(reports)}
            for k, v in sorted(stats.items())]
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["metric", "n", "mean", "sd", "reports"])
            w.writeheader()
            w.writerows(rows)
    return rows
