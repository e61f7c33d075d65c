"""Batch command line front end.

One subcommand per study stage, so a full simulate, select-window, fit,
predict, score pipeline is a shell script. Every command reads a JSON
config document, writes its artifacts plus a JSON manifest into --out,
and is deterministic given config and seed: manifests carry no
timestamps, JSON keys are sorted, and --threads never changes any output
byte.

Exit codes: 0 success, 2 config error, 3 numerical failure.
"""

import argparse
import hashlib
import json
import os
import sys

import numpy as np
import pandas as pd

from . import __version__
from .covmodel import (
    CompositeModel,
    PointSet,
    SiteTable,
    composite_cov,
    demo_sites,
    model_from_dict,
)
from .estimate import (
    Dataset,
    DegeneratePairError,
    Window,
    empirical_cov,
    empirical_variogram,
    fit,
    select_window,
)
from .kernels import cov, validate
from .predict import rolling_predict, score
from .simulate import NotPositiveDefiniteError, SimulationRequest, simulate


class ConfigError(Exception):
    """Invalid configuration document or unreadable input file."""


_NUMERIC_ERRORS = (
    NotPositiveDefiniteError,
    DegeneratePairError,
    np.linalg.LinAlgError,
    ArithmeticError,
)


# ---------------------------------------------------------------------------
# config plumbing


def _check_keys(doc: dict, allowed: set, where: str) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"{where} has unknown keys: {unknown}")


def _need(doc: dict, key: str, where: str):
    if key not in doc:
        raise ConfigError(f"{where} is missing required key {key!r}")
    return doc[key]


def _as_positive_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(f"{where} must be a positive integer")
    return value


def _as_seed(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or not (
        0 <= value < 2**64
    ):
        raise ConfigError(f"{where} must be an integer in [0, 2^64)")
    return value


def _resolve(path: str, base_dir: str) -> str:
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


def _load_json_file(path: str, where: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {where} file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{where} file {path} is not valid JSON: {exc}") from exc


def _load_model(entry, base_dir: str, where: str):
    """Model document (inline object) or path to a model JSON file."""
    if isinstance(entry, str):
        doc = _load_json_file(_resolve(entry, base_dir), where)
    elif isinstance(entry, dict):
        doc = entry
    else:
        raise ConfigError(f"{where} must be an object or a file path")
    try:
        model = model_from_dict(doc)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"{where} is not a valid model document: {exc}") from exc
    checked = model.spacetime if isinstance(model, CompositeModel) else model
    report = validate(checked)
    if not report.ok:
        raise ConfigError(f"{where} fails validity checks: {report.violations}")
    return model


def _load_sites(entry, mode, base_dir: str) -> SiteTable:
    if entry == "demo":
        if mode not in (None, "euclidean-km"):
            raise ConfigError("sites_mode cannot override the demo layout")
        return demo_sites()
    if not isinstance(entry, str):
        raise ConfigError("sites must be \"demo\" or a CSV file path")
    path = _resolve(entry, base_dir)
    try:
        return SiteTable.from_csv(path, mode=mode or "euclidean-km")
    except OSError as exc:
        raise ConfigError(f"cannot read sites file {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"bad sites file {path}: {exc}") from exc


def _load_days(entry, where: str) -> tuple:
    if isinstance(entry, bool):
        raise ConfigError(f"{where} must be a day count or a list of days")
    if isinstance(entry, int):
        if entry < 1:
            raise ConfigError(f"{where} must be positive")
        return tuple(range(entry))
    if isinstance(entry, list) and entry:
        if not all(isinstance(d, int) and not isinstance(d, bool) for d in entry):
            raise ConfigError(f"{where} entries must be integers")
        if sorted(set(entry)) != entry:
            raise ConfigError(f"{where} must be strictly increasing")
        return tuple(entry)
    raise ConfigError(f"{where} must be a day count or a nonempty list of days")


def _load_dataset(entry, sites: SiteTable, base_dir: str) -> Dataset:
    if not isinstance(entry, str):
        raise ConfigError("data must be a CSV file path")
    path = _resolve(entry, base_dir)
    try:
        return Dataset.from_csv(path, sites)
    except OSError as exc:
        raise ConfigError(f"cannot read data file {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"bad data file {path}: {exc}") from exc


def _load_window(entry, where: str) -> Window:
    _check_keys(entry, {"d_s_km", "d_t_days"}, where)
    try:
        return Window(
            float(_need(entry, "d_s_km", where)), float(_need(entry, "d_t_days", where))
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {where}: {exc}") from exc


def _model_hash(model) -> str:
    doc = json.dumps(model.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(doc.encode()).hexdigest()


def _write_json(path: str, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_manifest(out_dir: str, command: str, config: dict, seed, outputs: dict,
                    extra: dict) -> str:
    doc = {
        "version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "outputs": outputs,
    }
    doc.update(extra)
    path = os.path.join(out_dir, f"{command}.manifest.json")
    _write_json(path, doc)
    return path


def _model_cov(model, i: int, j: int, h, u):
    if isinstance(model, CompositeModel):
        return composite_cov(model, i, j, h, u)
    return cov(model, i, j, h, u)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(config: dict, seed_flag, threads: int, out_dir: str,
                 base_dir: str) -> None:
    _check_keys(
        config,
        {"model", "sites", "sites_mode", "days", "n_reps", "seed"},
        "simulate config",
    )
    model = _load_model(_need(config, "model", "simulate config"), base_dir, "model")
    sites = _load_sites(
        _need(config, "sites", "simulate config"), config.get("sites_mode"), base_dir
    )
    days = _load_days(_need(config, "days", "simulate config"), "days")
    n_reps = _as_positive_int(_need(config, "n_reps", "simulate config"), "n_reps")
    seed = _as_seed(
        seed_flag if seed_flag is not None else config.get("seed", 0), "seed"
    )

    pts = PointSet.grid(len(sites.ids), days, model.p)
    result = simulate(
        SimulationRequest(model=model, pts=pts, sites=sites, n_reps=n_reps, seed=seed)
    )
    data = Dataset.from_replicates(sites, days, model.p, result.values)
    csv_path = os.path.join(out_dir, "simulate.csv")
    data.to_csv(csv_path)
    _write_manifest(
        out_dir,
        "simulate",
        config,
        seed,
        {"values_csv": os.path.basename(csv_path)},
        {
            "model_hash": _model_hash(model),
            "jitter_eps": result.eps,
            "n_values_per_replicate": int(len(days) * len(sites.ids) * model.p),
            "n_replicates": n_reps,
        },
    )


_FIT_KEYS = {
    "data",
    "sites",
    "sites_mode",
    "window",
    "variant",
    "family",
    "objective",
    "b_grid",
    "fit_tau",
    "composite",
    "standardize",
    "max_outer",
    "outer_tol",
    "block_maxiter",
    "grad_step",
}


def _fit_kwargs_from(config: dict) -> dict:
    kwargs = {}
    if "b_grid" in config:
        grid = config["b_grid"]
        if not isinstance(grid, list) or not grid:
            raise ConfigError("b_grid must be a nonempty list of numbers")
        kwargs["b_grid"] = tuple(float(b) for b in grid)
    for key, caster in (
        ("fit_tau", bool),
        ("composite", bool),
        ("max_outer", int),
        ("outer_tol", float),
        ("block_maxiter", int),
        ("grad_step", float),
    ):
        if key in config:
            value = config[key]
            if caster is bool and not isinstance(value, bool):
                raise ConfigError(f"{key} must be true or false")
            try:
                kwargs[key] = caster(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad {key}: {exc}") from exc
    if "standardize" in config:
        if not isinstance(config["standardize"], bool):
            raise ConfigError("standardize must be true or false")
        kwargs["standardize_data"] = config["standardize"]
    return kwargs


def cmd_fit(config: dict, seed_flag, threads: int, out_dir: str, base_dir: str) -> None:
    _check_keys(config, _FIT_KEYS, "fit config")
    sites = _load_sites(
        _need(config, "sites", "fit config"), config.get("sites_mode"), base_dir
    )
    data = _load_dataset(_need(config, "data", "fit config"), sites, base_dir)
    window = _load_window(_need(config, "window", "fit config"), "window")
    kwargs = _fit_kwargs_from(config)
    try:
        report = fit(
            data,
            window,
            variant=config.get("variant", "NS-D"),
            family=config.get("family", "gneiting-matern"),
            objective=config.get("objective", "wpl"),
            threads=threads,
            **kwargs,
        )
    except _NUMERIC_ERRORS:
        raise
    except ValueError as exc:
        raise ConfigError(f"fit configuration rejected: {exc}") from exc

    report_path = os.path.join(out_dir, "fit.report.json")
    with open(report_path, "w") as fh:
        fh.write(report.to_json(include_timing=False))
    _write_manifest(
        out_dir,
        "fit",
        config,
        None,
        {"report_json": os.path.basename(report_path)},
        {
            "model_hash": _model_hash(report.model),
            "objective": report.objective,
            "b": report.b,
            "converged": report.converged,
            "n_pairs_used": report.n_pairs_used,
            "n_pairs_total": report.n_pairs_total,
        },
    )


_PREDICT_KEYS = {"data", "sites", "sites_mode", "model", "targets", "q_days"}


def _run_predict(config: dict, where: str, base_dir: str):
    _check_keys(config, _PREDICT_KEYS, where)
    sites = _load_sites(
        _need(config, "sites", where), config.get("sites_mode"), base_dir
    )
    data = _load_dataset(_need(config, "data", where), sites, base_dir)
    model = _load_model(_need(config, "model", where), base_dir, "model")
    targets = _need(config, "targets", where)
    if (
        not isinstance(targets, list)
        or not targets
        or not all(isinstance(t, str) for t in targets)
    ):
        raise ConfigError("targets must be a nonempty list of site ids")
    missing = [t for t in targets if t not in sites.ids]
    if missing:
        raise ConfigError(f"targets not in the site table: {missing}")
    q_days = _as_positive_int(config.get("q_days", 2), "q_days")
    pred = rolling_predict(model, data, tuple(targets), q_days=q_days)
    return model, pred


def cmd_predict(config: dict, seed_flag, threads: int, out_dir: str,
                base_dir: str) -> None:
    model, pred = _run_predict(config, "predict config", base_dir)
    csv_path = os.path.join(out_dir, "predictions.csv")
    pred.to_frame().to_csv(csv_path, index=False)
    _write_manifest(
        out_dir,
        "predict",
        config,
        None,
        {"predictions_csv": os.path.basename(csv_path)},
        {
            "model_hash": _model_hash(model),
            "n_scored_days": int(pred.days.size),
            "skipped_days": {str(k): v for k, v in pred.skipped.items()},
        },
    )


def cmd_score(config: dict, seed_flag, threads: int, out_dir: str,
              base_dir: str) -> None:
    model, pred = _run_predict(config, "score config", base_dir)
    if pred.empty:
        raise ConfigError(
            f"no day has the required conditioning history; skipped: {pred.skipped}"
        )
    table = score(pred)
    json_path = os.path.join(out_dir, "scores.json")
    _write_json(json_path, table.to_dict())
    _write_manifest(
        out_dir,
        "score",
        config,
        None,
        {"scores_json": os.path.basename(json_path)},
        {"model_hash": _model_hash(model), "n_scored_days": int(pred.days.size)},
    )


_VARIOGRAM_KEYS = {"data", "sites", "sites_mode", "bins", "lags", "kind", "model",
                   "curve_points"}


def cmd_variogram(config: dict, seed_flag, threads: int, out_dir: str,
                  base_dir: str) -> None:
    _check_keys(config, _VARIOGRAM_KEYS, "variogram config")
    sites = _load_sites(
        _need(config, "sites", "variogram config"), config.get("sites_mode"), base_dir
    )
    data = _load_dataset(_need(config, "data", "variogram config"), sites, base_dir)
    bins = _need(config, "bins", "variogram config")
    if not isinstance(bins, list) or len(bins) < 2:
        raise ConfigError("bins must list at least two edges (one bin)")
    lags = _need(config, "lags", "variogram config")
    if not isinstance(lags, list) or not lags or not all(
        isinstance(k, int) and not isinstance(k, bool) and k >= 0 for k in lags
    ):
        raise ConfigError("lags must be a nonempty list of day lags >= 0")
    kind = config.get("kind", "cov")
    if kind not in ("cov", "variogram"):
        raise ConfigError("kind must be \"cov\" or \"variogram\"")

    try:
        if kind == "cov":
            emp = empirical_cov(data, bins=bins, lags=lags)
        else:
            emp = empirical_variogram(data, bins=bins, lags=lags)
    except ValueError as exc:
        raise ConfigError(f"variogram configuration rejected: {exc}") from exc
    emp_path = os.path.join(out_dir, "variogram.empirical.csv")
    emp.to_csv(emp_path, index=False)
    outputs = {"empirical_csv": os.path.basename(emp_path)}
    extra: dict = {"kind": kind}

    if "model" in config:
        model = _load_model(config["model"], base_dir, "model")
        n_h = _as_positive_int(config.get("curve_points", 101), "curve_points")
        p = model.p
        h_grid = np.linspace(0.0, float(bins[-1]), n_h)
        rows = []
        for lag in lags:
            for i in range(p):
                for j in range(i, p):
                    if kind == "variogram" and i != j:
                        continue
                    for h in h_grid:
                        value = _model_cov(model, i, j, float(h), float(lag))
                        if kind == "variogram":
                            value = _model_cov(model, i, i, 0.0, 0.0) - value
                        rows.append((i, j, lag, float(h), float(value)))
        curves = pd.DataFrame(
            rows, columns=["var_i", "var_j", "lag", "h", "value"]
        )
        if kind == "variogram":
            curves = curves.drop(columns=["var_j"]).rename(
                columns={"var_i": "variable"}
            )
        model_path = os.path.join(out_dir, "variogram.model.csv")
        curves.to_csv(model_path, index=False)
        outputs["model_csv"] = os.path.basename(model_path)
        extra["model_hash"] = _model_hash(model)

    _write_manifest(out_dir, "variogram", config, None, outputs, extra)


_SELECT_KEYS = {
    "model",
    "sites",
    "sites_mode",
    "days",
    "n_reps",
    "candidates",
    "n_sims",
    "variant",
    "family",
    "seed",
    "fit",
}


def cmd_select_window(config: dict, seed_flag, threads: int, out_dir: str,
                      base_dir: str) -> None:
    _check_keys(config, _SELECT_KEYS, "select-window config")
    model = _load_model(_need(config, "model", "select-window config"), base_dir, "model")
    if isinstance(model, CompositeModel):
        raise ConfigError("select-window expects a plain space-time model document")
    sites = _load_sites(
        _need(config, "sites", "select-window config"),
        config.get("sites_mode"),
        base_dir,
    )
    days = _load_days(_need(config, "days", "select-window config"), "days")
    n_reps = _as_positive_int(
        _need(config, "n_reps", "select-window config"), "n_reps"
    )
    cand_doc = _need(config, "candidates", "select-window config")
    if not isinstance(cand_doc, list) or not cand_doc:
        raise ConfigError("candidates must be a nonempty list of [d_s_km, d_t_days]")
    candidates = []
    for entry in cand_doc:
        if not isinstance(entry, list) or len(entry) != 2:
            raise ConfigError("each candidate must be a [d_s_km, d_t_days] pair")
        try:
            candidates.append(Window(float(entry[0]), float(entry[1])))
        except ValueError as exc:
            raise ConfigError(f"bad candidate {entry}: {exc}") from exc
    n_sims = _as_positive_int(_need(config, "n_sims", "select-window config"), "n_sims")
    seed = _as_seed(
        seed_flag if seed_flag is not None else config.get("seed", 0), "seed"
    )
    fit_kwargs = None
    if "fit" in config:
        _check_keys(
            config["fit"],
            {"b_grid", "fit_tau", "max_outer", "outer_tol", "block_maxiter",
             "grad_step", "standardize"},
            "select-window fit settings",
        )
        fit_kwargs = _fit_kwargs_from(config["fit"])

    try:
        selection = select_window(
            model,
            sites,
            days,
            n_reps,
            candidates,
            n_sims=n_sims,
            seed=seed,
            variant=config.get("variant", "NS-D"),
            family=config.get("family"),
            fit_kwargs=fit_kwargs,
            threads=threads,
        )
    except _NUMERIC_ERRORS:
        raise
    except ValueError as exc:
        raise ConfigError(f"select-window configuration rejected: {exc}") from exc

    rows = [
        {
            "d_s_km": res.window.d_s,
            "d_t_days": res.window.d_t,
            "criterion": res.criterion,
            "pair_fraction": res.pair_fraction,
            "b_mean": res.b_mean,
            "b_sd": res.b_sd,
            "n_failed": res.n_failed,
        }
        for res in selection.results
    ]
    csv_path = os.path.join(out_dir, "select_window.csv")
    pd.DataFrame(rows).to_csv(csv_path, index=False)
    best = min(selection.results, key=lambda res: res.criterion)
    _write_manifest(
        out_dir,
        "select-window",
        config,
        seed,
        {"criteria_csv": os.path.basename(csv_path)},
        {
            "model_hash": _model_hash(model),
            "n_sims": selection.n_sims,
            "param_names": list(selection.param_names),
            "best_window": {"d_s_km": best.window.d_s, "d_t_days": best.window.d_t},
        },
    )


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "score": cmd_score,
    "variogram": cmd_variogram,
    "select-window": cmd_select_window,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvst",
        description="Multivariate space-time Gaussian field toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="JSON config document")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the config seed")
        cmd.add_argument("--threads", type=int, default=None,
                         help="worker threads (default: all cores)")
        cmd.add_argument("--out", default=".", help="output directory")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    if threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must lie in [0, 2^64)", file=sys.stderr)
        return 2

    try:
        config = _load_json_file(args.config, "config")
        if not isinstance(config, dict):
            raise ConfigError("config must be a JSON object")
        out_dir = args.out
        os.makedirs(out_dir, exist_ok=True)
        base_dir = os.path.dirname(os.path.abspath(args.config))
        _COMMANDS[args.command](config, args.seed, threads, out_dir, base_dir)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
