"""Long/short sentiment state-space toolkit.

Estimates a panel of bounded sentiment series as the sum of a few persistent
random-walk factors, stationary series-specific components, and noise
(constrained EM over a Kalman filter/smoother), then feeds the filtered
signals into quantile-regression inference, correlation-structure
regressions, cointegration checks, and a signal-gated trading backtest.
"""
from ._kernels import active_backend
from .exceptions import NumericalError
from .statespace import FilterOutput, SmootherOutput, StateSpaceSpec
from .em import (ConstraintSet, EmTrace, fit_em, information_criteria,
                 lr_test, mlnsl_constraints, mlss_constraints, select_q,
                 standard_errors)
from .models import (MODEL_TAGS, FilteredSignals, IntradaySentiment,
                     SentimentPanel, aggregate_daily, demo_spec, fill_missing,
                     fit_model, implied_step_correlation, signal_to_noise,
                     simulate_mlss)
from .analysis import (QUANTILE_GRID, CorrelationStudy, EngleGrangerResult,
                       LongShortTests, MarketFactor, MultiLagResult,
                       OLSRegression, QuantileFit, correlation_regression,
                       engle_granger, long_short_decomposition_tests, lt_test,
                       multi_lag_test, one_factor_residual_correlation,
                       pca_market, pinball_loss, quantile_fit, r1_table,
                       significance_stars, sparsity_hall_sheather, unvechl,
                       vechl)
from .backtest import (ClassifierState, MonteCarloReport, PerformanceMetrics,
                       PortfolioLedger, TradeSignalSeries, criterion_variable,
                       fit_logit, gate_signal, ledger_frame, mc_significance,
                       performance_metrics, rolling_signals, run_ledger)

__version__ = "0.1.0"

__all__ = [
    "NumericalError", "active_backend", "__version__",
    "StateSpaceSpec", "FilterOutput", "SmootherOutput",
    "ConstraintSet", "EmTrace", "fit_em", "mlss_constraints",
    "mlnsl_constraints", "select_q", "standard_errors", "lr_test",
    "information_criteria",
    "MODEL_TAGS", "SentimentPanel", "IntradaySentiment", "FilteredSignals",
    "aggregate_daily", "fill_missing", "fit_model", "signal_to_noise",
    "implied_step_correlation", "simulate_mlss", "demo_spec",
    "QUANTILE_GRID", "vechl", "unvechl", "pinball_loss",
    "significance_stars", "MarketFactor", "pca_market",
    "one_factor_residual_correlation", "EngleGrangerResult", "engle_granger",
    "OLSRegression", "CorrelationStudy", "correlation_regression",
    "QuantileFit", "quantile_fit", "sparsity_hall_sheather", "lt_test",
    "LongShortTests", "long_short_decomposition_tests", "MultiLagResult",
    "multi_lag_test", "r1_table",
    "criterion_variable", "ClassifierState", "fit_logit", "TradeSignalSeries",
    "rolling_signals", "gate_signal", "PortfolioLedger", "run_ledger",
    "ledger_frame", "PerformanceMetrics", "performance_metrics",
    "MonteCarloReport", "mc_significance",
]
