"""Batch pipeline front end: synthesize, estimate, analyze, backtest, mc.

Each subcommand reads one JSON config, writes its artifacts into ``--out``,
and finishes with a ``run_report.json`` (config echo, stage seed, timings,
output inventory, warnings).  Tables are CSV, each with a ``<name>.meta.json``
sidecar describing the schema; parameter sets and one-off reports are JSON.
Relative paths in the config resolve against the output directory so the
stages chain naturally: ``synth`` writes the files ``estimate`` reads, and so
on.

Exit codes: 0 success, 2 validation/usage error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import sys
import time
import warnings
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from . import __version__
from .analysis import (correlation_regression, engle_granger,
                       long_short_decomposition_tests, multi_lag_test,
                       pca_market, one_factor_residual_correlation, r1_table,
                       significance_stars)
from .backtest import (TradeSignalSeries, gate_signal, ledger_frame,
                       mc_significance, performance_metrics, rolling_signals,
                       run_ledger)
from .em import (count_free_parameters, mlnsl_constraints, mlss_constraints,
                 select_q, standard_errors)
from .exceptions import NumericalError
from .models import (MODEL_TAGS, FilteredSignals, demo_spec, fit_model,
                     implied_step_correlation, read_panel_csv,
                     signal_to_noise, signals_frame, simulate_mlss,
                     write_panel_csv)

_STAGE_IDS = {"synth": 0, "estimate": 1, "analyze": 2, "backtest": 3, "mc": 4}

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "paths": {
        "news": "news.csv",
        "social": "social.csv",
        "market": "market.csv",
        "prices": "prices.csv",
        "assets": "assets.csv",
    },
    "synth": {
        "n_series": 6,
        "n_factors": 2,
        "n_obs": 2000,
        "scale": 0.19,
        "signal_strength": 0.15,
        "noise_scale": 0.012,
        "rv_noise": 0.3,
        "sectors": ["CYC", "DEF"],
    },
    "estimate": {
        "models": list(MODEL_TAGS),
        "q_news": 2,
        "q_social": 2,
        "tol": 1e-3,
        "max_iter": 500,
        "standard_errors": False,
        "q_grid": None,
    },
    "analyze": {
        "models": list(MODEL_TAGS),
        "taus": [0.01, 0.05, 0.10, 0.33, 0.50, 0.66, 0.90, 0.95, 0.99],
        "h": 1,
        "h_max": 5,
        "q_mrk": 1,
    },
    "backtest": {
        "models": list(MODEL_TAGS),
        "window": 126,
        "cash0": 100000.0,
        "cost_rate": 0.001,
        "alpha_grid": [0.0, 0.2, 0.35, 0.5, 0.65, 0.8],
    },
    "mc": {
        "model": "MLSS",
        "alpha": 0.0,
        "n_sims": 1000,
        "n_workers": None,
    },
}


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: Optional[str]) -> dict:
    """Defaults deep-merged with the JSON file at ``path`` (if given)."""
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    file = Path(path)
    if not file.is_file():
        raise ValueError(f"config file not found: {file}")
    with open(file, "r", encoding="utf-8") as fh:
        user = json.load(fh)
    if not isinstance(user, dict):
        raise ValueError("config root must be a JSON object")
    return _deep_merge(DEFAULT_CONFIG, user)


def _norm_tag(tag: str) -> str:
    mapping = {t.lower(): t for t in MODEL_TAGS}
    norm = mapping.get(str(tag).lower())
    if norm is None:
        raise ValueError(f"unknown model tag {tag!r}; expected one of "
                         f"{MODEL_TAGS}")
    return norm


def _resolve(out_dir: Path, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else out_dir / p


def _require_files(config: dict, out_dir: Path, keys) -> None:
    for key in keys:
        path = _resolve(out_dir, config["paths"][key])
        if not path.is_file():
            raise ValueError(f"required input '{key}' not found: {path}")


def validate_config(config: dict, command: str, out_dir: Path) -> None:
    """Stage-specific sanity checks; failures map to exit code 2."""
    if command in ("synth", "mc"):
        seed = config.get("seed")
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ValueError(f"'{command}' draws random numbers: config "
                             "needs an integer 'seed'")
    if command == "synth":
        cfg = config["synth"]
        if int(cfg["n_series"]) < 1:
            raise ValueError("synth.n_series must be >= 1")
        if not 1 <= int(cfg["n_factors"]) <= int(cfg["n_series"]):
            raise ValueError("need 1 <= synth.n_factors <= synth.n_series")
        if int(cfg["n_obs"]) < 0:
            raise ValueError("synth.n_obs must be >= 0")
        for key in ("scale", "noise_scale"):
            if float(cfg[key]) <= 0:
                raise ValueError(f"synth.{key} must be positive")
        if not cfg["sectors"]:
            raise ValueError("synth.sectors must be a non-empty list")
    elif command == "estimate":
        cfg = config["estimate"]
        cfg["models"] = [_norm_tag(t) for t in cfg["models"]]
        if not cfg["models"]:
            raise ValueError("estimate.models must be non-empty")
        if min(int(cfg["q_news"]), int(cfg["q_social"])) < 1:
            raise ValueError("estimate.q_news/q_social must be >= 1")
        if float(cfg["tol"]) <= 0 or int(cfg["max_iter"]) < 1:
            raise ValueError("estimate.tol must be > 0 and max_iter >= 1")
        if cfg["q_grid"] is not None and not all(
                int(q) >= 1 for q in cfg["q_grid"]):
            raise ValueError("estimate.q_grid entries must be >= 1")
        _require_files(config, out_dir, ("news", "social"))
    elif command == "analyze":
        cfg = config["analyze"]
        cfg["models"] = [_norm_tag(t) for t in cfg["models"]]
        if not all(0.0 < float(t) < 1.0 for t in cfg["taus"]):
            raise ValueError("analyze.taus must lie strictly inside (0, 1)")
        if int(cfg["h"]) < 0 or int(cfg["h_max"]) < 2:
            raise ValueError("analyze.h must be >= 0 and h_max >= 2")
        if int(cfg["q_mrk"]) < 1:
            raise ValueError("analyze.q_mrk must be >= 1")
        _require_files(config, out_dir, ("market", "prices", "news",
                                         "social"))
    elif command == "backtest":
        cfg = config["backtest"]
        cfg["models"] = [_norm_tag(t) for t in cfg["models"]]
        if int(cfg["window"]) < 2:
            raise ValueError("backtest.window must be >= 2")
        if float(cfg["cash0"]) <= 0 or float(cfg["cost_rate"]) < 0:
            raise ValueError("backtest.cash0 must be > 0 and cost_rate >= 0")
        if not all(0.0 <= float(a) < 1.0 for a in cfg["alpha_grid"]):
            raise ValueError("backtest.alpha_grid entries must be in [0, 1)")
        _require_files(config, out_dir, ("market",))
    elif command == "mc":
        cfg = config["mc"]
        cfg["model"] = _norm_tag(cfg["model"])
        if int(cfg["n_sims"]) < 1:
            raise ValueError("mc.n_sims must be >= 1")
        if not 0.0 <= float(cfg["alpha"]) < 1.0:
            raise ValueError("mc.alpha must be in [0, 1)")
        if cfg["n_workers"] is not None and int(cfg["n_workers"]) < 1:
            raise ValueError("mc.n_workers must be >= 1 when given")
        _require_files(config, out_dir, ("market",))


def _stage_seed(config: dict, command: str) -> Optional[int]:
    """Stage-named substream of the root seed, as a plain integer."""
    seed = config.get("seed")
    if seed is None:
        return None
    ss = np.random.SeedSequence([int(seed), _STAGE_IDS[command]])
    return int(ss.generate_state(1, np.uint32)[0])


# ---------------------------------------------------------------------------
# artifact writers
# ---------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if np.isfinite(value) else repr(value)
    if isinstance(obj, (np.datetime64, pd.Timestamp)):
        return str(np.datetime64(obj, "D"))
    return obj


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_table(frame: pd.DataFrame, out_dir: Path, name: str,
                 command: str, outputs: list, extra_meta: dict | None = None,
                 date_format: str = "%Y-%m-%d") -> None:
    csv_path = out_dir / f"{name}.csv"
    frame.to_csv(csv_path, index=False, date_format=date_format)
    meta = {"table": name, "command": command, "version": __version__,
            "columns": [str(c) for c in frame.columns],
            "n_rows": int(frame.shape[0])}
    if extra_meta:
        meta.update(extra_meta)
    _write_json(out_dir / f"{name}.meta.json", meta)
    outputs += [f"{name}.csv", f"{name}.meta.json"]


def _read_meta(out_dir: Path, name: str) -> dict:
    path = out_dir / f"{name}.meta.json"
    if not path.is_file():
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(config: dict, out_dir: Path) -> dict:
    cfg = config["synth"]
    k, q = int(cfg["n_series"]), int(cfg["n_factors"])
    n_obs = int(cfg["n_obs"])
    outputs: list[str] = []
    warnings_log: list[str] = []
    assets = [f"A{i + 1:02d}" for i in range(k)]
    sectors = [cfg["sectors"][i % len(cfg["sectors"])] for i in range(k)]
    betas = np.linspace(0.7, 1.3, k)

    if n_obs == 0:
        # degenerate request: emit every artifact as header-only tables
        panel_cols = ["date"] + assets
        truth_cols = (["date"] + [f"F{j + 1}" for j in range(q)]
                      + [f"psi_{a}" for a in assets])
        for name in ("news", "social"):
            _write_table(pd.DataFrame(columns=panel_cols), out_dir,
                         Path(config["paths"][name]).stem, "synth", outputs,
                         {"synthetic": True, "source": name})
            _write_table(pd.DataFrame(columns=truth_cols), out_dir,
                         f"truth_{name}", "synth", outputs)
        _write_table(pd.DataFrame(columns=["date", "price", "rv", "ret"]),
                     out_dir, Path(config["paths"]["market"]).stem, "synth",
                     outputs)
        _write_table(pd.DataFrame(columns=["date"] + assets), out_dir,
                     Path(config["paths"]["prices"]).stem, "synth", outputs)
        _write_table(pd.DataFrame({"asset": assets, "sector": sectors,
                                   "beta": betas}), out_dir,
                     Path(config["paths"]["assets"]).stem, "synth", outputs)
        return {"outputs": outputs, "warnings": warnings_log,
                "info": {"n_obs": 0}}

    spec = demo_spec(k, q, scale=float(cfg["scale"]))
    root = np.random.SeedSequence([int(config["seed"]),
                                   _STAGE_IDS["synth"]])
    seed_news, seed_social, seed_market = (
        int(s.generate_state(1, np.uint32)[0]) for s in root.spawn(3))

    truth = {}
    for name, seed in (("news", seed_news), ("social", seed_social)):
        panel, tr = simulate_mlss(spec, n_obs, seed=seed, assets=assets,
                                  source=name)
        truth[name] = (panel, tr)
        stem = Path(config["paths"][name]).stem
        write_panel_csv(panel, out_dir / f"{stem}.csv")
        _write_json(out_dir / f"{stem}.meta.json",
                    {"table": stem, "command": "synth",
                     "version": __version__, "synthetic": True,
                     "source": name, "n_rows": n_obs,
                     "columns": ["date"] + assets})
        outputs += [f"{stem}.csv", f"{stem}.meta.json"]
        truth_frame = pd.DataFrame(
            np.hstack([tr["factors"], tr["transient"]]),
            columns=[f"F{j + 1}" for j in range(q)]
            + [f"psi_{a}" for a in assets])
        truth_frame.insert(0, "date", pd.to_datetime(panel.dates))
        _write_table(truth_frame, out_dir, f"truth_{name}", "synth", outputs)

    news_panel, news_truth = truth["news"]
    dates = news_panel.dates
    rng = np.random.default_rng(seed_market)
    psibar = news_truth["transient"].mean(axis=1)
    strength = float(cfg["signal_strength"])
    noise_scale = float(cfg["noise_scale"])
    # the market return over (t-1, t] loads on yesterday's transient average:
    # a planted lag-one short-horizon signal for the downstream stages
    ret_tail = (strength * psibar[:-1]
                + noise_scale * rng.normal(size=max(n_obs - 1, 0)))
    level = 100.0 * np.exp(np.concatenate([[0.0], np.cumsum(ret_tail)]))
    base_var = float(np.var(ret_tail)) if ret_tail.size else noise_scale ** 2
    rv_noise = float(cfg["rv_noise"])
    rv = base_var * np.exp(rv_noise * rng.normal(size=n_obs)
                           - 0.5 * rv_noise ** 2)
    market = pd.DataFrame({"date": pd.to_datetime(dates), "price": level,
                           "rv": rv,
                           "ret": np.concatenate([[np.nan], ret_tail])})
    _write_table(market, out_dir, Path(config["paths"]["market"]).stem,
                 "synth", outputs,
                 {"note": "ret[t] is the log return into date t; the first "
                          "row has no return"})

    idio = 0.8 * noise_scale * rng.normal(size=(max(n_obs - 1, 0), k))
    asset_ret = ret_tail[:, None] * betas[None, :] + idio
    asset_levels = 100.0 * np.exp(np.vstack([np.zeros(k),
                                             np.cumsum(asset_ret, axis=0)]))
    prices = pd.DataFrame(asset_levels, columns=assets)
    prices.insert(0, "date", pd.to_datetime(dates))
    _write_table(prices, out_dir, Path(config["paths"]["prices"]).stem,
                 "synth", outputs)
    _write_table(pd.DataFrame({"asset": assets, "sector": sectors,
                               "beta": betas}), out_dir,
                 Path(config["paths"]["assets"]).stem, "synth", outputs)
    return {"outputs": outputs, "warnings": warnings_log,
            "info": {"n_obs": n_obs, "n_series": k, "n_factors": q,
                     "seeds": {"news": seed_news, "social": seed_social,
                               "market": seed_market}}}


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------

def _load_panel(config: dict, out_dir: Path, key: str):
    stem = Path(config["paths"][key]).stem
    meta = _read_meta(out_dir, stem)
    return read_panel_csv(_resolve(out_dir, config["paths"][key]),
                          source=key,
                          synthetic=bool(meta.get("synthetic", False)))


def _source_inputs(tag: str, panel, q: int):
    """The value matrix and constraint set that fit_model uses per source."""
    if tag in ("LSS", "LNSL"):
        values = panel.values.mean(axis=1, keepdims=True)
    else:
        values = panel.values
    k = values.shape[1]
    if tag == "MLSS":
        cons = mlss_constraints(k, q)
    elif tag == "LSS":
        cons = mlss_constraints(1, 1)
    else:
        cons = mlnsl_constraints(k)
    return values, cons


def cmd_estimate(config: dict, out_dir: Path) -> dict:
    cfg = config["estimate"]
    news = _load_panel(config, out_dir, "news")
    social = _load_panel(config, out_dir, "social")
    outputs: list[str] = []
    warnings_log: list[str] = []
    ic_rows = []
    timings = {}
    q_by_source = {"news": int(cfg["q_news"]), "social": int(cfg["q_social"])}

    for tag in cfg["models"]:
        t0 = time.perf_counter()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            fs = fit_model(tag, news, social, q_news=q_by_source["news"],
                           q_social=q_by_source["social"],
                           tol=float(cfg["tol"]),
                           max_iter=int(cfg["max_iter"]))
        warnings_log += [f"{tag}: {w.message}" for w in caught]

        frame = signals_frame(fs)
        _write_table(frame, out_dir, f"signals_{tag}", "estimate", outputs,
                     {"tag": tag, "long_idx": fs.long_idx,
                      "short_idx": fs.short_idx,
                      "signal_columns": fs.columns, "meta": fs.meta})

        params = {"tag": tag, "version": __version__, "sources": {}}
        trace_rows = []
        for src in fs.specs:
            spec, trace = fs.specs[src], fs.traces[src]
            values, cons = _source_inputs(
                tag, news if src == "news" else social, q_by_source[src])
            n_params = count_free_parameters(cons)
            n_obs = values.shape[0]
            aic = -2.0 * trace.loglik + 2 * n_params
            bic = (-2.0 * trace.loglik
                   + n_params * np.log(n_obs * values.shape[1]))
            entry = {
                "lambda": spec.lam, "phi": spec.phi_diag,
                "q_short": spec.q_short, "r": spec.r_diag,
                "loglik": trace.loglik, "n_iter": trace.n_iter,
                "converged": trace.converged,
                "final_delta": trace.final_delta, "n_params": n_params,
                "aic": aic, "bic": bic,
                "signal_to_noise": signal_to_noise(spec, tag),
                "implied_step_correlation": implied_step_correlation(spec),
            }
            if cfg["standard_errors"]:
                se = standard_errors(spec, values, cons)
                entry["standard_errors"] = {"names": se["names"],
                                            "estimate": se["estimate"],
                                            "se": se["se"]}
            params["sources"][src] = entry
            ic_rows.append({"tag": tag, "source": src,
                            "q": fs.meta["q"][src], "loglik": trace.loglik,
                            "n_params": n_params, "aic": aic, "bic": bic,
                            "converged": trace.converged})
            trace_rows += [{"source": src, "iteration": i,
                            "loglik": float(ll)}
                           for i, ll in enumerate(trace.loglik_path)]
        if tag == "Obs":
            params["note"] = ("pass-through of differenced cross-sectional "
                              "averages; nothing estimated")
        _write_json(out_dir / f"params_{tag}.json", params)
        outputs.append(f"params_{tag}.json")
        _write_table(pd.DataFrame(trace_rows,
                                  columns=["source", "iteration", "loglik"]),
                     out_dir, f"trace_{tag}", "estimate", outputs)
        timings[tag] = round(time.perf_counter() - t0, 3)

    if ic_rows:
        _write_table(pd.DataFrame(ic_rows), out_dir, "ic_table", "estimate",
                     outputs)

    if cfg["q_grid"]:
        rows = []
        for src, panel in (("news", news), ("social", social)):
            q_best, cand = select_q(panel.values,
                                    [int(x) for x in cfg["q_grid"]],
                                    tol=float(cfg["tol"]),
                                    max_iter=int(cfg["max_iter"]))
            for row in cand:
                rows.append({"source": src, **row,
                             "chosen": row["q"] == q_best})
        _write_table(pd.DataFrame(rows), out_dir, "q_selection", "estimate",
                     outputs)

    return {"outputs": outputs, "warnings": warnings_log,
            "info": {"timings_s": timings}}


# ---------------------------------------------------------------------------
# shared ingestion for analyze / backtest / mc
# ---------------------------------------------------------------------------

def _load_signals(out_dir: Path, tag: str) -> FilteredSignals:
    name = f"signals_{tag}"
    path = out_dir / f"{name}.csv"
    if not path.is_file():
        raise ValueError(f"missing input: {path} (run the estimate stage "
                         f"for model {tag!r} first)")
    meta = _read_meta(out_dir, name)
    frame = pd.read_csv(path)
    if frame.shape[1] < 2 or frame.columns[0] != "date":
        raise ValueError(f"{path} must start with a 'date' column")
    columns = list(meta.get("signal_columns", frame.columns[1:]))
    return FilteredSignals(
        tag=meta.get("tag", tag),
        signal=frame[columns].to_numpy(dtype=float),
        columns=columns,
        dates=pd.to_datetime(frame["date"]).to_numpy(dtype="datetime64[D]"),
        long_idx=[int(i) for i in meta.get("long_idx", [])],
        short_idx=[int(i) for i in meta.get("short_idx", [])],
        meta=meta.get("meta", {}))


def _load_market(config: dict, out_dir: Path) -> pd.DataFrame:
    frame = pd.read_csv(_resolve(out_dir, config["paths"]["market"]))
    for col in ("date", "price", "rv", "ret"):
        if col not in frame.columns:
            raise ValueError(f"market CSV lacks column '{col}'")
    frame["date"] = pd.to_datetime(frame["date"])
    dropped = int(frame["ret"].isna().sum())
    frame = frame.dropna(subset=["ret"]).reset_index(drop=True)
    if (frame["rv"] <= 0).any():
        raise ValueError("market rv column must be positive")
    frame.attrs["dropped_nan_ret"] = dropped
    return frame


def _join_dates(named: dict, min_rows: int, warnings_log: list):
    """Inner join on dates; dropped rows are reported, an empty or too-small
    intersection is an error naming the offending dates."""
    keys = list(named)
    common = named[keys[0]]
    for key in keys[1:]:
        common = np.intersect1d(common, named[key])
    for key, dates in named.items():
        missing = np.setdiff1d(dates, common)
        if missing.size:
            sample = ", ".join(str(d) for d in missing[:5])
            warnings_log.append(
                f"date join dropped {missing.size} row(s) from {key} "
                f"(first: {sample})")
    if common.size < min_rows:
        detail = "; ".join(
            f"{key}: {dates.min()}..{dates.max()} ({dates.size} rows)"
            for key, dates in named.items())
        raise ValueError(
            f"inputs share only {common.size} dates (need >= {min_rows}); "
            f"check alignment -- {detail}")
    return common


def _subset_signals(fs: FilteredSignals, mask: np.ndarray) -> FilteredSignals:
    return FilteredSignals(fs.tag, fs.signal[mask], fs.columns,
                           fs.dates[mask], fs.long_idx, fs.short_idx,
                           meta=fs.meta)


def _aligned_inputs(config: dict, out_dir: Path, tags, min_rows: int,
                    warnings_log: list):
    market = _load_market(config, out_dir)
    if market.attrs["dropped_nan_ret"]:
        warnings_log.append(f"market: dropped "
                            f"{market.attrs['dropped_nan_ret']} row(s) "
                            "without a return")
    signals = {tag: _load_signals(out_dir, tag) for tag in tags}
    market_dates = market["date"].to_numpy(dtype="datetime64[D]")
    named = {"market": market_dates}
    named.update({f"signals_{t}": fs.dates for t, fs in signals.items()})
    common = _join_dates(named, min_rows, warnings_log)
    keep = np.isin(market_dates, common)
    market = market.loc[keep].reset_index(drop=True)
    signals = {tag: _subset_signals(fs, np.isin(fs.dates, common))
               for tag, fs in signals.items()}
    return market, signals


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def cmd_analyze(config: dict, out_dir: Path) -> dict:
    cfg = config["analyze"]
    outputs: list[str] = []
    warnings_log: list[str] = []
    taus = [float(t) for t in cfg["taus"]]
    h = int(cfg["h"])
    market, signals = _aligned_inputs(config, out_dir, cfg["models"],
                                      min_rows=30, warnings_log=warnings_log)
    returns = market["ret"].to_numpy(dtype=float)

    _write_table(r1_table(returns, signals, taus=taus, h=h), out_dir,
                 "r1_table", "analyze", outputs,
                 {"h": h, "n_obs": int(returns.size)})

    decomp_rows = []
    for tag, fs in signals.items():
        if not (fs.long_idx and fs.short_idx):
            continue
        for tau in taus:
            res = long_short_decomposition_tests(returns, fs, tau, h=h)
            decomp_rows.append({
                "tag": tag, "tau": tau, "r1": res.fit.r1,
                "v_full": res.fit.v_hat,
                "v_long_only": res.v_long_only,
                "v_short_only": res.v_short_only,
                "long_stat": res.long_stat, "long_df": res.long_df,
                "long_p": res.long_p,
                "long_stars": significance_stars(res.long_p),
                "short_stat": res.short_stat, "short_df": res.short_df,
                "short_p": res.short_p,
                "short_stars": significance_stars(res.short_p)})
    if decomp_rows:
        _write_table(pd.DataFrame(decomp_rows), out_dir,
                     "decomposition_tests", "analyze", outputs, {"h": h})

    lag_rows = []
    for tag, fs in signals.items():
        for tau in taus:
            for res in multi_lag_test(returns, fs, tau,
                                      h_max=int(cfg["h_max"])):
                lag_rows.append({
                    "tag": tag, "tau": tau, "h": res.h, "stat": res.stat,
                    "df": res.df, "p_value": res.p_value,
                    "stars": significance_stars(res.p_value),
                    "v_one_lag": res.v_one_lag, "v_h_lags": res.v_h_lags})
    _write_table(pd.DataFrame(lag_rows), out_dir, "multilag_tests",
                 "analyze", outputs, {"h_max": int(cfg["h_max"])})

    # correlation structure: asset return correlations against the
    # model-implied sentiment-change correlations
    prices = pd.read_csv(_resolve(out_dir, config["paths"]["prices"]))
    if prices.columns[0] != "date":
        raise ValueError("prices CSV must start with a 'date' column")
    asset_names = [str(c) for c in prices.columns[1:]]
    levels = prices.iloc[:, 1:].to_numpy(dtype=float)
    if levels.shape[0] < 30:
        raise ValueError("prices panel too short for correlation analysis")
    asset_returns = np.diff(np.log(levels), axis=0)

    sectors = None
    assets_path = _resolve(out_dir, config["paths"]["assets"])
    if assets_path.is_file():
        table = pd.read_csv(assets_path)
        mapping = dict(zip(table["asset"].astype(str), table["sector"]))
        missing = [a for a in asset_names if a not in mapping]
        if missing:
            raise ValueError(f"assets table lacks sector for: {missing}")
        sectors = [str(mapping[a]) for a in asset_names]
    else:
        warnings_log.append("assets table not found: sector regressions "
                            "skipped")

    c_ret = np.corrcoef(asset_returns.T)
    c_models = {}
    for tag in cfg["models"]:
        params_path = out_dir / f"params_{tag}.json"
        if not params_path.is_file():
            continue
        with open(params_path, "r", encoding="utf-8") as fh:
            params = json.load(fh)
        for src, entry in params.get("sources", {}).items():
            implied = np.asarray(entry["implied_step_correlation"],
                                 dtype=float)
            if implied.shape == c_ret.shape:
                c_models[f"{tag}_{src}"] = implied
    for key in ("news", "social"):
        panel = _load_panel(config, out_dir, key)
        if panel.values.shape[1] == c_ret.shape[0]:
            c_models[f"Obs_{key}"] = np.corrcoef(
                np.diff(panel.values, axis=0).T)

    factor = pca_market(asset_returns, q_mrk=int(cfg["q_mrk"]),
                        prices=levels[1:])
    _write_json(out_dir / "pca.json",
                {"q_mrk": factor.q_mrk,
                 "explained_variance": factor.explained_variance,
                 "loadings": factor.loadings, "assets": asset_names})
    outputs.append("pca.json")

    if c_models:
        c_ret_resid, _, _ = one_factor_residual_correlation(
            asset_returns, factor.factor_returns[:, 0])
        study = correlation_regression(c_ret, c_models, sectors=sectors,
                                       c_ret_resid=c_ret_resid)
        _write_table(study.table(), out_dir, "correlation_regressions",
                     "analyze", outputs, {"n_assets": len(asset_names)})
    else:
        warnings_log.append("no model-implied correlation matrices match "
                            "the asset panel: correlation regressions "
                            "skipped")

    coint_rows = []
    mkt_level = market["price"].to_numpy(dtype=float)
    market_dates = market["date"].to_numpy().astype("datetime64[D]")
    price_dates = pd.to_datetime(
        prices["date"]).to_numpy().astype("datetime64[D]")
    # PCA factor-level rows follow the return rows: one per price date
    # after the first; re-index them onto the joined market dates
    factor_level = pd.Series(factor.factor_level[:, 0],
                             index=price_dates[1:]).reindex(market_dates)
    fl = factor_level.to_numpy(dtype=float)
    fl_ok = np.isfinite(fl)
    for tag, fs in signals.items():
        if not fs.long_idx:
            continue
        lt_level = np.cumsum(fs.signal[:, fs.long_idx].sum(axis=1))
        targets = (("market_level", mkt_level, np.ones_like(fl_ok)),
                   ("pca_factor_level", fl, fl_ok))
        for name, series, ok in targets:
            n_obs = int(ok.sum())
            if n_obs < 50:
                warnings_log.append(f"cointegration vs {name} skipped for "
                                    f"{tag}: only {n_obs} aligned rows")
                continue
            res = engle_granger(lt_level[ok], series[ok])
            coint_rows.append({
                "tag": tag, "target": name, "alpha": res.alpha,
                "coint_beta": res.coint_beta, "adf_stat": res.adf_stat,
                "crit_1pct": res.crit_values[0.01],
                "crit_5pct": res.crit_values[0.05],
                "crit_10pct": res.crit_values[0.10],
                "p_band": res.p_band, "reject_5pct": res.reject_flag,
                "lags": res.lags, "n_obs": n_obs})
    if coint_rows:
        _write_table(pd.DataFrame(coint_rows), out_dir, "cointegration",
                     "analyze", outputs)

    stn_rows = []
    for tag in cfg["models"]:
        params_path = out_dir / f"params_{tag}.json"
        if not params_path.is_file():
            continue
        with open(params_path, "r", encoding="utf-8") as fh:
            params = json.load(fh)
        for src, entry in params.get("sources", {}).items():
            for i, value in enumerate(entry.get("signal_to_noise", [])):
                stn_rows.append({"tag": tag, "source": src, "series": i,
                                 "signal_to_noise": value})
    if stn_rows:
        _write_table(pd.DataFrame(stn_rows), out_dir, "stn_table", "analyze",
                     outputs)

    return {"outputs": outputs, "warnings": warnings_log,
            "info": {"n_obs": int(returns.size), "taus": taus}}


# ---------------------------------------------------------------------------
# backtest
# ---------------------------------------------------------------------------

def _buy_and_hold(dates: np.ndarray) -> TradeSignalSeries:
    m = dates.size - 1
    return TradeSignalSeries(
        dates=dates,
        s=np.concatenate([[0], np.ones(m, dtype=np.int8)]).astype(np.int8),
        y_hat=np.zeros(m, dtype=np.int8),
        proba=np.zeros(m),
        r2_path=np.zeros(m),
        converged=np.ones(m, dtype=bool))


def _metric_row(strategy: str, alpha, cost_rate: float, series,
                ledger) -> dict:
    metrics = performance_metrics(ledger)
    row = {"strategy": strategy,
           "alpha": np.nan if alpha is None else float(alpha),
           "cost_rate": cost_rate,
           "final_portfolio": float(ledger.portfolio[-1]),
           "trades": ledger.trades, "total_costs": ledger.total_costs,
           "sells": series.sell_count(),
           "converged_fraction": float(np.mean(series.converged))
           if series.converged.size else 1.0}
    row.update(metrics.as_dict())
    return row


def cmd_backtest(config: dict, out_dir: Path) -> dict:
    cfg = config["backtest"]
    outputs: list[str] = []
    warnings_log: list[str] = []
    window = int(cfg["window"])
    cash0 = float(cfg["cash0"])
    cost_rate = float(cfg["cost_rate"])
    alphas = [float(a) for a in cfg["alpha_grid"]]
    market, signals = _aligned_inputs(config, out_dir, cfg["models"],
                                      min_rows=window + 3,
                                      warnings_log=warnings_log)
    returns = market["ret"].to_numpy(dtype=float)
    rv = market["rv"].to_numpy(dtype=float)
    level = market["price"].to_numpy(dtype=float)

    metric_rows = []
    gate_rows = []
    first_dates = None
    for tag, fs in signals.items():
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            raw = rolling_signals(fs, returns, rv, window=window)
        warnings_log += [f"{tag}: {w.message}" for w in caught]
        if not np.all(raw.converged):
            n_bad = int((~raw.converged).sum())
            warnings_log.append(f"{tag}: {n_bad} of {raw.converged.size} "
                                "rolling windows did not converge")
        if first_dates is None:
            first_dates = raw.dates
        ledger_level = level[window:]
        gate_row = {"tag": tag}
        for alpha in alphas:
            series = gate_signal(raw, alpha)
            gate_row[f"alpha_{alpha:g}"] = series.trade_count()
            for rate in (cost_rate, 0.0):
                ledger = run_ledger(series, ledger_level, cash0=cash0,
                                    cost_rate=rate)
                metric_rows.append(_metric_row(tag, alpha, rate, series,
                                               ledger))
                if alpha == 0.0 and rate == cost_rate:
                    _write_table(ledger_frame(ledger), out_dir,
                                 f"ledger_{tag}", "backtest", outputs)
        gate_rows.append(gate_row)

    bh = _buy_and_hold(first_dates)
    bh_rows = []
    for rate in (cost_rate, 0.0):
        ledger = run_ledger(bh, level[window:], cash0=cash0, cost_rate=rate)
        bh_rows.append(_metric_row("BH", None, rate, bh, ledger))
        if rate == cost_rate:
            _write_table(ledger_frame(ledger), out_dir, "ledger_BH",
                         "backtest", outputs)

    metrics = pd.DataFrame(bh_rows + metric_rows)
    _write_table(metrics, out_dir, "metrics", "backtest", outputs,
                 {"window": window, "cash0": cash0, "cost_rate": cost_rate})
    _write_table(pd.DataFrame(gate_rows), out_dir, "gate_counts", "backtest",
                 outputs, {"alpha_grid": alphas})
    return {"outputs": outputs, "warnings": warnings_log,
            "info": {"n_obs": int(returns.size), "window": window,
                     "n_ledger_days": int(first_dates.size)}}


# ---------------------------------------------------------------------------
# mc
# ---------------------------------------------------------------------------

def cmd_mc(config: dict, out_dir: Path) -> dict:
    cfg = config["mc"]
    bt = config["backtest"]
    outputs: list[str] = []
    warnings_log: list[str] = []
    window = int(bt["window"])
    tag = cfg["model"]
    market, signals = _aligned_inputs(config, out_dir, [tag],
                                      min_rows=window + 3,
                                      warnings_log=warnings_log)
    returns = market["ret"].to_numpy(dtype=float)
    rv = market["rv"].to_numpy(dtype=float)
    level = market["price"].to_numpy(dtype=float)

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        raw = rolling_signals(signals[tag], returns, rv, window=window)
    warnings_log += [f"{tag}: {w.message}" for w in caught]
    series = gate_signal(raw, float(cfg["alpha"]))
    seed = _stage_seed(config, "mc")
    workers = cfg["n_workers"]
    report = mc_significance(series, level[window:],
                             n_sims=int(cfg["n_sims"]), seed=seed,
                             cash0=float(bt["cash0"]),
                             cost_rate=float(bt["cost_rate"]),
                             n_workers=None if workers is None
                             else int(workers))
    nan_sims = int(np.isnan(report.sharpe_sims).sum())
    _write_json(out_dir / "mc_report.json",
                {"model": tag, "alpha": float(cfg["alpha"]),
                 "n_sims": report.n_sims, "stage_seed": seed,
                 "root_seed": config["seed"],
                 "sharpe_real": report.sharpe_real,
                 "sortino_real": report.sortino_real,
                 "sharpe_percentile": report.sharpe_percentile,
                 "sortino_percentile": report.sortino_percentile,
                 "sell_count": report.sell_count, "nan_sims": nan_sims})
    outputs.append("mc_report.json")
    sims = pd.DataFrame({"sim": np.arange(report.n_sims),
                         "sharpe": report.sharpe_sims,
                         "sortino": report.sortino_sims})
    _write_table(sims, out_dir, "mc_sims", "mc", outputs)
    return {"outputs": outputs, "warnings": warnings_log,
            "info": {"sharpe_percentile": report.sharpe_percentile,
                     "sell_count": report.sell_count}}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_COMMANDS = {"synth": cmd_synth, "estimate": cmd_estimate,
             "analyze": cmd_analyze, "backtest": cmd_backtest, "mc": cmd_mc}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mlss",
        description="Sentiment state-space pipeline: synthesize panels, "
                    "estimate the filtering models, run the quantile and "
                    "correlation analyses, and backtest the gated strategy.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
            ("synth", "draw a synthetic sentiment/market data set"),
            ("estimate", "fit the filtering models and write signals"),
            ("analyze", "quantile, correlation and cointegration tables"),
            ("backtest", "rolling classifier strategies with cost ledgers"),
            ("mc", "Monte Carlo significance of the strategy Sharpe")):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", default=None,
                         help="JSON config; defaults fill missing keys")
        cmd.add_argument("--out", default=".",
                         help="output directory (created if absent); "
                              "relative config paths resolve against it")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the config seed")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    out_dir = Path(args.out)
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config["seed"] = int(args.seed)
        out_dir.mkdir(parents=True, exist_ok=True)
        validate_config(config, args.command, out_dir)
        t0 = time.perf_counter()
        result = _COMMANDS[args.command](config, out_dir)
        elapsed = time.perf_counter() - t0
        missing = [n for n in result["outputs"]
                   if not (out_dir / n).is_file()]
        if missing:
            raise NumericalError(f"stage finished but outputs are missing: "
                                 f"{missing}")
        report = {"command": args.command, "version": __version__,
                  "config": config,
                  "stage_seed": _stage_seed(config, args.command),
                  "timings": {"total_s": round(elapsed, 3),
                              **result.get("info", {}).get("timings_s", {})},
                  "outputs": result["outputs"],
                  "warnings": result["warnings"],
                  "info": {k: v for k, v in result.get("info", {}).items()
                           if k != "timings_s"}}
        _write_json(out_dir / "run_report.json", report)
        for line in result["warnings"]:
            print(f"warning: {line}", file=sys.stderr)
        print(f"{args.command}: wrote {len(result['outputs'])} artifact(s) "
              f"to {out_dir} in {elapsed:.1f}s")
        return 0
    except NumericalError as exc:
        failure = {"command": args.command, "error": str(exc),
                   "version": __version__}
        path = getattr(exc, "loglik_path", None)
        if path is not None:
            failure["partial_loglik_path"] = np.asarray(path)
        try:
            _write_json(out_dir / "run_report.json", failure)
        except OSError:
            pass
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except np.linalg.LinAlgError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
