"""End-to-end tests for the command-line pipeline.

A small synthetic pipeline (synth -> estimate -> analyze -> backtest -> mc)
runs once per module; the tests then check artifact contracts, determinism,
exit codes, and cross-stage consistency against independent readings of the
CSV inputs.
"""
import json
import shutil
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from mlss.cli import DEFAULT_CONFIG, load_config, main

CONFIG = {
    "seed": 3,
    "synth": {"n_obs": 360},
    "estimate": {"max_iter": 60},
    "analyze": {"taus": [0.05, 0.5], "h_max": 3},
    "backtest": {"window": 60, "alpha_grid": [0.0, 0.5]},
    "mc": {"n_sims": 40},
}

STAGES = ("synth", "estimate", "analyze", "backtest", "mc")


def write_config(directory: Path, overrides: dict) -> Path:
    path = directory / "config.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(overrides, fh)
    return path


def run(command: str, config: Path, out: Path) -> int:
    return main([command, "--config", str(config), "--out", str(out)])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    out = root / "run"
    config = write_config(root, CONFIG)
    for command in STAGES:
        assert run(command, config, out) == 0, f"stage {command} failed"
        shutil.copy(out / "run_report.json", out / f"report_{command}.json")
    return config, out


def read_report(out: Path, command: str) -> dict:
    with open(out / f"report_{command}.json", encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# config and argument handling
# ---------------------------------------------------------------------------

def test_missing_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit):
        main([])


def test_config_merges_over_defaults(tmp_path):
    path = write_config(tmp_path, {"backtest": {"window": 42}})
    config = load_config(str(path))
    assert config["backtest"]["window"] == 42
    assert config["backtest"]["cost_rate"] == \
        DEFAULT_CONFIG["backtest"]["cost_rate"]
    assert config["synth"]["n_obs"] == DEFAULT_CONFIG["synth"]["n_obs"]


def test_config_file_not_found_exits_2(tmp_path):
    assert main(["synth", "--config", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path)]) == 2


def test_synth_requires_integer_seed(tmp_path):
    config = write_config(tmp_path, {"seed": None,
                                     "synth": {"n_obs": 10}})
    assert run("synth", config, tmp_path / "out") == 2


def test_unknown_model_tag_exits_2(tmp_path, pipeline):
    _, out = pipeline
    config = write_config(tmp_path, {**CONFIG,
                                     "estimate": {"models": ["bogus"]}})
    assert run("estimate", config, out) == 2


def test_validation_rejects_bad_ranges(tmp_path):
    bad = [
        ("synth", {"seed": 1, "synth": {"n_factors": 9, "n_series": 2}}),
        ("backtest", {"backtest": {"window": 1}}),
        ("mc", {"seed": 1, "mc": {"alpha": 1.0}}),
        ("analyze", {"analyze": {"taus": [0.0]}}),
    ]
    for command, overrides in bad:
        config = write_config(tmp_path, overrides)
        assert run(command, config, tmp_path / "out") == 2, command


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def test_synth_is_byte_deterministic(tmp_path):
    config = write_config(tmp_path, {"seed": 11, "synth": {"n_obs": 40}})
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("synth", config, a) == 0
    assert run("synth", config, b) == 0
    for name in ("news.csv", "social.csv", "market.csv", "prices.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    c = tmp_path / "c"
    assert main(["synth", "--config", str(config), "--out", str(c),
                 "--seed", "12"]) == 0
    assert (a / "news.csv").read_bytes() != (c / "news.csv").read_bytes()


def test_synth_zero_obs_writes_headers_only(tmp_path):
    config = write_config(tmp_path, {"seed": 0, "synth": {"n_obs": 0}})
    out = tmp_path / "out"
    assert run("synth", config, out) == 0
    for name in ("news.csv", "market.csv", "prices.csv"):
        lines = (out / name).read_text().strip().splitlines()
        assert len(lines) == 1, name
    assert (out / "news.csv").read_text().startswith("date,")


def test_synth_panel_and_market_shapes(pipeline):
    _, out = pipeline
    news = pd.read_csv(out / "news.csv")
    market = pd.read_csv(out / "market.csv")
    n = CONFIG["synth"]["n_obs"]
    assert news.shape == (n, 1 + DEFAULT_CONFIG["synth"]["n_series"])
    assert list(market.columns) == ["date", "price", "rv", "ret"]
    assert market.shape[0] == n
    assert np.isnan(market["ret"].iloc[0])
    level = market["price"].to_numpy()
    back = np.diff(np.log(level))
    assert np.allclose(back, market["ret"].to_numpy()[1:], atol=1e-12)
    assert (market["rv"] > 0).all()


def test_synth_seed_override_is_echoed(pipeline, tmp_path):
    config, _ = pipeline
    out = tmp_path / "seeded"
    assert main(["synth", "--config", str(config), "--out", str(out),
                 "--seed", "99"]) == 0
    with open(out / "run_report.json", encoding="utf-8") as fh:
        report = json.load(fh)
    assert report["config"]["seed"] == 99


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------

def test_estimate_writes_all_artifacts(pipeline):
    _, out = pipeline
    for tag in ("MLSS", "LSS", "MLNSL", "LNSL", "Obs"):
        assert (out / f"signals_{tag}.csv").is_file()
        assert (out / f"signals_{tag}.meta.json").is_file()
        assert (out / f"params_{tag}.json").is_file()
        assert (out / f"trace_{tag}.csv").is_file()
    assert (out / "ic_table.csv").is_file()


def test_estimate_loglik_paths_non_decreasing(pipeline):
    _, out = pipeline
    trace = pd.read_csv(out / "trace_MLSS.csv")
    for _, sub in trace.groupby("source"):
        path = sub.sort_values("iteration")["loglik"].to_numpy()
        assert path.size >= 2
        assert (np.diff(path) >= -1e-8).all()


def test_estimate_params_layout(pipeline):
    _, out = pipeline
    with open(out / "params_MLSS.json", encoding="utf-8") as fh:
        params = json.load(fh)
    assert set(params["sources"]) == {"news", "social"}
    k = DEFAULT_CONFIG["synth"]["n_series"]
    q = DEFAULT_CONFIG["estimate"]["q_news"]
    entry = params["sources"]["news"]
    assert np.asarray(entry["lambda"]).shape == (k, q)
    assert len(entry["phi"]) == k and len(entry["r"]) == k
    assert np.asarray(entry["q_short"]).shape == (k, k)
    assert np.asarray(entry["implied_step_correlation"]).shape == (k, k)
    assert entry["aic"] > 0 or entry["aic"] < 0  # present and numeric
    assert isinstance(entry["converged"], bool)


def test_estimate_signals_meta_reconstructs_layout(pipeline):
    _, out = pipeline
    with open(out / "signals_MLSS.meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    assert meta["long_idx"] == [0, 1, 2, 3]
    assert meta["short_idx"] == [4, 5]
    frame = pd.read_csv(out / "signals_MLSS.csv")
    assert list(frame.columns[1:]) == meta["signal_columns"]
    assert frame.shape[0] == CONFIG["synth"]["n_obs"] - 1


def test_estimate_obs_is_differenced_average_of_the_input_csvs(pipeline):
    _, out = pipeline
    frame = pd.read_csv(out / "signals_Obs.csv")
    for source in ("news", "social"):
        panel = pd.read_csv(out / f"{source}.csv")
        expected = np.diff(panel.iloc[:, 1:].to_numpy(dtype=float).mean(
            axis=1))
        assert np.allclose(frame[f"dSbar_{source}"].to_numpy(), expected,
                           atol=1e-12)


def test_estimate_missing_inputs_exit_2(tmp_path):
    config = write_config(tmp_path, {"seed": 0})
    assert run("estimate", config, tmp_path / "empty") == 2


def test_estimate_numerical_failure_exits_3_with_partial_trace(tmp_path):
    out = tmp_path / "degenerate"
    out.mkdir()
    dates = pd.bdate_range("2015-01-02", periods=50)
    for name in ("news", "social"):
        frame = pd.DataFrame(np.zeros((50, 3)), columns=["A1", "A2", "A3"])
        frame.insert(0, "date", dates)
        frame.to_csv(out / f"{name}.csv", index=False)
        with open(out / f"{name}.meta.json", "w", encoding="utf-8") as fh:
            json.dump({"synthetic": True}, fh)
    config = write_config(tmp_path, {"seed": 0})
    assert run("estimate", config, out) == 3
    with open(out / "run_report.json", encoding="utf-8") as fh:
        report = json.load(fh)
    assert "error" in report


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def test_analyze_r1_table_layout_and_planted_signal(pipeline):
    _, out = pipeline
    table = pd.read_csv(out / "r1_table.csv")
    assert list(table["tau"]) == CONFIG["analyze"]["taus"]
    for tag in ("MLSS", "LSS", "MLNSL", "LNSL", "Obs"):
        assert f"r1_{tag}" in table.columns
        assert f"stars_{tag}" in table.columns
    # the synthetic market return loads on lagged transient sentiment that
    # only the long-short filters separate: their fit must beat the raw
    # differenced average
    row = table.iloc[0]
    assert row["r1_MLSS"] > row["r1_Obs"]


def test_analyze_decomposition_flags_the_short_block(pipeline):
    _, out = pipeline
    table = pd.read_csv(out / "decomposition_tests.csv")
    assert set(table["tag"]) <= {"MLSS", "LSS"}
    mlss = table[(table["tag"] == "MLSS") & (table["tau"] == 0.5)].iloc[0]
    assert mlss["short_p"] < 0.01
    assert {"long_stat", "short_stat", "long_stars"} <= set(table.columns)


def test_analyze_multilag_table(pipeline):
    _, out = pipeline
    table = pd.read_csv(out / "multilag_tests.csv")
    widths = {"MLSS": 6, "LSS": 4, "MLNSL": 2, "LNSL": 2, "Obs": 2}
    for _, row in table.iterrows():
        assert row["df"] == widths[row["tag"]] * (row["h"] - 1)
        assert 0.0 <= row["p_value"] <= 1.0


def test_analyze_correlation_and_pca(pipeline):
    _, out = pipeline
    table = pd.read_csv(out / "correlation_regressions.csv")
    k = DEFAULT_CONFIG["synth"]["n_series"]
    all_rows = table[table["pairs"] == "all"]
    assert (all_rows["n_pairs"] == k * (k - 1) // 2).all()
    assert {"MLSS_news", "Obs_news"} <= set(table["model"])
    with open(out / "pca.json", encoding="utf-8") as fh:
        pca = json.load(fh)
    assert len(pca["loadings"][0]) == k
    # eigenvalues of a K x K correlation matrix: positive, summing to K,
    # with the market factor dominating the one-factor synthetic panel
    eigenvalues = np.asarray(pca["explained_variance"])
    assert eigenvalues.shape == (k,)
    assert np.isclose(eigenvalues.sum(), k)
    assert eigenvalues[0] / k > 0.5


def test_analyze_cointegration_rows(pipeline):
    _, out = pipeline
    table = pd.read_csv(out / "cointegration.csv")
    assert set(table["target"]) == {"market_level", "pca_factor_level"}
    assert set(table["p_band"]) <= {"<0.01", "0.01-0.05", "0.05-0.10",
                                    ">0.10"}
    assert (table["lags"] >= 0).all()


# ---------------------------------------------------------------------------
# backtest
# ---------------------------------------------------------------------------

def test_backtest_metrics_layout(pipeline):
    _, out = pipeline
    metrics = pd.read_csv(out / "metrics.csv")
    assert metrics.iloc[0]["strategy"] == "BH"
    zero_cost = metrics[metrics["cost_rate"] == 0.0]
    assert (zero_cost["total_costs"] == 0.0).all()
    bh = metrics[(metrics["strategy"] == "BH")
                 & (metrics["cost_rate"] > 0)].iloc[0]
    assert bh["trades"] == 1
    assert bh["total_costs"] > 0
    assert bh["sells"] == 0


def test_backtest_gate_counts_non_increasing(pipeline):
    _, out = pipeline
    gate = pd.read_csv(out / "gate_counts.csv")
    alpha_cols = [c for c in gate.columns if c.startswith("alpha_")]
    assert alpha_cols == sorted(alpha_cols,
                                key=lambda c: float(c.split("_")[1]))
    counts = gate[alpha_cols].to_numpy()
    assert (np.diff(counts, axis=1) <= 0).all()


def test_backtest_gate_counts_match_metrics(pipeline):
    _, out = pipeline
    gate = pd.read_csv(out / "gate_counts.csv").set_index("tag")
    metrics = pd.read_csv(out / "metrics.csv")
    for tag in gate.index:
        row = metrics[(metrics["strategy"] == tag)
                      & (metrics["alpha"] == 0.0)
                      & (metrics["cost_rate"] == 0.0)].iloc[0]
        assert row["trades"] == gate.loc[tag, "alpha_0"]


def test_backtest_ledger_identity(pipeline):
    _, out = pipeline
    ledger = pd.read_csv(out / "ledger_MLSS.csv")
    assert np.allclose(ledger["portfolio"],
                       ledger["position_value"] + ledger["cash"],
                       rtol=1e-9)
    assert ledger["signal"].iloc[0] == 0


def test_backtest_bh_ledger_tracks_market(pipeline):
    _, out = pipeline
    ledger = pd.read_csv(out / "ledger_BH.csv")
    level = ledger["market_level"].to_numpy()
    port = ledger["portfolio"].to_numpy()
    # after the single entry (whose cost is a fixed cash hit), the portfolio
    # moves one-for-one with the held units: P_t - P_1 = c_0 (M_t - M_1)
    units = ledger["position_value"].iloc[1] / level[1]
    assert np.allclose(port[1:] - port[1], units * (level[1:] - level[1]),
                       rtol=1e-9, atol=1e-6)


def test_backtest_date_misalignment_exits_2(pipeline, tmp_path):
    config, out = pipeline
    broken = tmp_path / "broken"
    broken.mkdir()
    for path in out.glob("signals_*"):
        shutil.copy(path, broken / path.name)
    market = pd.read_csv(out / "market.csv")
    market["date"] = (pd.to_datetime(market["date"])
                      + pd.DateOffset(years=10))
    market.to_csv(broken / "market.csv", index=False)
    assert run("backtest", config, broken) == 2


# ---------------------------------------------------------------------------
# mc
# ---------------------------------------------------------------------------

def test_mc_report_layout(pipeline):
    _, out = pipeline
    with open(out / "mc_report.json", encoding="utf-8") as fh:
        report = json.load(fh)
    assert report["n_sims"] == CONFIG["mc"]["n_sims"]
    assert report["model"] == "MLSS"
    assert 0.0 <= report["sharpe_percentile"] <= 1.0
    assert report["sell_count"] > 0
    sims = pd.read_csv(out / "mc_sims.csv")
    assert sims.shape[0] == CONFIG["mc"]["n_sims"]


def test_mc_worker_count_does_not_change_results(pipeline, tmp_path):
    config, out = pipeline
    for n_workers, name in ((1, "w1"), (3, "w3")):
        run_dir = tmp_path / name
        run_dir.mkdir()
        for path in list(out.glob("signals_*")) + [out / "market.csv"]:
            shutil.copy(path, run_dir / path.name)
        cfg = write_config(run_dir,
                           {**CONFIG, "mc": {"n_sims": 40,
                                             "n_workers": n_workers}})
        assert run("mc", cfg, run_dir) == 0
    report1 = json.load(open(tmp_path / "w1" / "mc_report.json"))
    report3 = json.load(open(tmp_path / "w3" / "mc_report.json"))
    assert report1["sharpe_percentile"] == report3["sharpe_percentile"]
    assert report1["sortino_percentile"] == report3["sortino_percentile"]
    sims1 = pd.read_csv(tmp_path / "w1" / "mc_sims.csv")
    sims3 = pd.read_csv(tmp_path / "w3" / "mc_sims.csv")
    assert np.array_equal(sims1["sharpe"], sims3["sharpe"], equal_nan=True)


# ---------------------------------------------------------------------------
# run reports
# ---------------------------------------------------------------------------

def test_run_reports_list_only_existing_outputs(pipeline):
    _, out = pipeline
    for command in STAGES:
        report = read_report(out, command)
        assert report["command"] == command
        assert report["outputs"], command
        for name in report["outputs"]:
            assert (out / name).is_file(), f"{command}: {name}"


def test_run_report_config_echo_reproduces_synth(pipeline, tmp_path):
    _, out = pipeline
    report = read_report(out, "synth")
    echo = write_config(tmp_path, report["config"])
    replay = tmp_path / "replay"
    assert run("synth", echo, replay) == 0
    assert (replay / "news.csv").read_bytes() == \
        (out / "news.csv").read_bytes()
    assert (replay / "market.csv").read_bytes() == \
        (out / "market.csv").read_bytes()
