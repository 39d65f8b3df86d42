"""Sentiment-gated trading backtest.

Turns filtered sentiment signals into a long/short position series via a
rolling logistic classifier of abnormal negative returns, runs a
cost-aware portfolio ledger against the market level, summarizes
performance, and checks significance against shuffled-signal Monte Carlo
strategies.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import stats as sps

from .models import FilteredSignals

__all__ = [
    "SELL_QUANTILE_Z",
    "ClassifierState",
    "TradeSignalSeries",
    "PortfolioLedger",
    "PerformanceMetrics",
    "MonteCarloReport",
    "criterion_variable",
    "fit_logit",
    "rolling_signals",
    "gate_signal",
    "run_ledger",
    "performance_metrics",
    "mc_significance",
    "ledger_frame",
]

#: One-third Gaussian quantile: the threshold defining an abnormal
#: negative standardized return.
SELL_QUANTILE_Z = float(sps.norm.ppf(1.0 / 3.0))

_COEF_CAP = 30.0


# ---------------------------------------------------------------------------
# criterion variable and logistic classifier
# ---------------------------------------------------------------------------

def criterion_variable(market_returns: np.ndarray,
                       realized_variance: np.ndarray) -> np.ndarray:
    """Binary indicator of an abnormal negative day: 1 when the return
    standardized by the realized variance falls below the one-third
    Gaussian quantile."""
    r = np.asarray(market_returns, dtype=float).ravel()
    rv = np.asarray(realized_variance, dtype=float).ravel()
    if r.shape != rv.shape:
        raise ValueError("returns and realized variance must align")
    if np.any(rv <= 0) or not np.all(np.isfinite(rv)):
        raise ValueError("realized variance must be positive")
    return (r / np.sqrt(rv) < SELL_QUANTILE_Z).astype(np.int8)


@dataclass
class ClassifierState:
    """Fitted logistic classifier for one rolling window."""

    theta: np.ndarray
    mcfadden_r2: float
    converged: bool
    n_obs: int

    def validate(self) -> None:
        if not (-1e-12 <= self.mcfadden_r2 <= 1.0 + 1e-12):
            raise ValueError("McFadden R^2 must lie in [0, 1]")
        if self.converged and not np.all(np.isfinite(self.theta)):
            raise ValueError("converged fit must have finite coefficients")

    def predict_proba(self, x_row: np.ndarray) -> float:
        return float(_sigmoid(np.asarray(x_row, dtype=float) @ self.theta))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _bernoulli_loglik(y: np.ndarray, p: np.ndarray) -> float:
    eps = 1e-12
    p = np.clip(p, eps, 1.0 - eps)
    return float(y @ np.log(p) + (1.0 - y) @ np.log(1.0 - p))


def fit_logit(x: np.ndarray, y: np.ndarray,
              max_iter: int = 100) -> ClassifierState:
    """Maximum-likelihood logistic regression by Newton iteration.

    ``x`` is the full design matrix (include the constant column).  On
    perfect separation the coefficients are clipped at +-30 and the fit is
    flagged unconverged; a single-class window degenerates to a constant
    classifier with zero goodness of fit.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if x.shape[0] != y.size:
        raise ValueError("x and y must have the same number of rows")
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise ValueError("design and labels must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    n, p = x.shape
    if np.linalg.matrix_rank(x) < p:
        raise ValueError("design matrix is rank-deficient on this window")

    y_bar = y.mean()
    if y_bar in (0.0, 1.0):
        # single-class window: constant classifier, no explanatory power
        theta = np.zeros(p)
        theta[0] = _COEF_CAP if y_bar == 1.0 else -_COEF_CAP
        return ClassifierState(theta, 0.0, True, n)

    ll_null = n * (y_bar * np.log(y_bar)
                   + (1.0 - y_bar) * np.log(1.0 - y_bar))
    theta = np.zeros(p)
    converged = False
    for _ in range(max_iter):
        prob = _sigmoid(x @ theta)
        grad = x.T @ (y - prob)
        if np.abs(grad).max() <= 1e-8:
            converged = True
            break
        weights = np.maximum(prob * (1.0 - prob), 1e-10)
        hess = x.T @ (weights[:, None] * x)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(hess, grad, rcond=None)
        theta = theta + step
        if np.abs(theta).max() > _COEF_CAP:
            # diverging coefficients: (quasi-)separated window; rescale
            # onto the cap so the decision boundary is preserved
            theta = theta * (_COEF_CAP / np.abs(theta).max())
            converged = False
            break
    ll_model = _bernoulli_loglik(y, _sigmoid(x @ theta))
    r2 = 1.0 - ll_model / ll_null
    state = ClassifierState(theta, float(np.clip(r2, 0.0, 1.0)),
                            converged, n)
    state.validate()
    return state


# ---------------------------------------------------------------------------
# rolling signal generation and gating
# ---------------------------------------------------------------------------

@dataclass
class TradeSignalSeries:
    """Position path produced by the rolling classifier.

    ``s`` has one more entry than ``y_hat``: position k >= 1 is dictated
    by the prediction formed on day k-1 of the tradeable range, and
    ``s[0] = 0`` is the flat inception position.  ``dates`` aligns with
    ``s`` (entry 0 is the inception day)."""

    dates: np.ndarray             # (m+1,) ledger days
    s: np.ndarray                 # (m+1,) positions in {-1, 0, +1}, s[0]=0
    y_hat: np.ndarray             # (m,) predicted abnormal-negative flags
    proba: np.ndarray             # (m,) predicted probabilities
    r2_path: np.ndarray           # (m,) rolling McFadden R^2
    converged: np.ndarray         # (m,) per-window convergence flags
    alpha_gate: Optional[float] = None   # quantile level of the gate
    r2_quantile: Optional[np.ndarray] = None  # (m,) gate thresholds

    @property
    def n_steps(self) -> int:
        return self.y_hat.size

    def trade_count(self) -> int:
        return int(np.abs(np.diff(self.s)).sum())

    def sell_count(self) -> int:
        return int((self.s == -1).sum())

    def validate(self) -> None:
        if self.s[0] != 0:
            raise ValueError("position path must start flat")
        if not np.all(np.isin(self.s[1:], (-1, 1))):
            raise ValueError("positions after inception must be -1 or +1")
        if self.s.size != self.y_hat.size + 1:
            raise ValueError("position path must have one leading entry")


def rolling_signals(signals: FilteredSignals, returns: np.ndarray,
                    realized_variance: np.ndarray,
                    window: int = 126) -> TradeSignalSeries:
    """Generate the daily trading signal from rolling classifier fits.

    On each day t of the tradeable range the classifier is fitted on the
    trailing ``window`` pairs (features on day u, outcome on day u+1) and
    predicts tomorrow's abnormal-negative flag from today's features; a
    predicted probability strictly above one half becomes a sell.  Windows
    where the fit is infeasible fall back to the intercept-only
    classifier instead of aborting the run.
    """
    returns = np.asarray(returns, dtype=float).ravel()
    rv = np.asarray(realized_variance, dtype=float).ravel()
    sig = signals.signal
    n = sig.shape[0]
    if returns.size != n or rv.size != n:
        raise ValueError("returns and realized variance must align "
                         "one-to-one with signal rows")
    if n <= window + 1:
        raise ValueError(f"need more than window+1={window + 1} rows")
    y_all = criterion_variable(returns, rv)
    r_tilde = returns / np.sqrt(rv)
    design = np.column_stack([np.ones(n), r_tilde, sig])

    m = n - 1 - window
    y_hat = np.zeros(m, dtype=np.int8)
    proba = np.zeros(m)
    r2 = np.zeros(m)
    conv = np.zeros(m, dtype=bool)
    for k, t in enumerate(range(window, n - 1)):
        rows = slice(t - window, t)
        x_win = design[rows]
        y_win = y_all[t - window + 1:t + 1].astype(float)
        try:
            state = fit_logit(x_win, y_win)
        except ValueError:
            state = fit_logit(np.ones((window, 1)), y_win)
            state = ClassifierState(
                np.concatenate([state.theta,
                                np.zeros(design.shape[1] - 1)]),
                0.0, False, window)
        proba[k] = state.predict_proba(design[t])
        y_hat[k] = 1 if proba[k] > 0.5 else 0
        r2[k] = state.mcfadden_r2
        conv[k] = state.converged
    s = np.empty(m + 1, dtype=np.int8)
    s[0] = 0
    s[1:] = np.where(y_hat == 1, -1, 1)
    out = TradeSignalSeries(signals.dates[window:n].copy(), s, y_hat, proba,
                            r2, conv)
    out.validate()
    return out


def gate_signal(raw: TradeSignalSeries, alpha: float,
                r2_path: Optional[np.ndarray] = None) -> TradeSignalSeries:
    """Suppress sells whose rolling goodness of fit is not in the top
    (1 - alpha) of its own past.

    A sell at step k survives only when its R^2 weakly exceeds the
    empirical alpha-quantile of the strictly earlier R^2 values (an
    expanding window; the first step has no history and always passes).
    alpha = 0 keeps every sell.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    r2 = raw.r2_path if r2_path is None else np.asarray(r2_path, dtype=float)
    if r2.size != raw.y_hat.size:
        raise ValueError("r2 path must align with the prediction path")
    m = raw.y_hat.size
    thresholds = np.full(m, -np.inf)
    keep = np.zeros(m, dtype=bool)
    for k in range(m):
        if alpha > 0.0 and k > 0:
            thresholds[k] = np.quantile(r2[:k], alpha,
                                        method="inverted_cdf")
        keep[k] = r2[k] >= thresholds[k]
    gated_sell = (raw.y_hat == 1) & keep
    s = np.empty(m + 1, dtype=np.int8)
    s[0] = 0
    s[1:] = np.where(gated_sell, -1, 1)
    out = TradeSignalSeries(raw.dates.copy(), s, raw.y_hat.copy(),
                            raw.proba.copy(), r2.copy(),
                            raw.converged.copy(), alpha, thresholds)
    out.validate()
    return out


# ---------------------------------------------------------------------------
# portfolio ledger
# ---------------------------------------------------------------------------

@dataclass
class PortfolioLedger:
    """Double-entry record of the long/short strategy.

    At every step the holding identity
    ``portfolio[t] = s[t] * c_0 * market_level[t] + cash[t]`` holds
    exactly; position changes move cash by the traded value plus a
    proportional cost of ``cost_rate / 2`` per unit of turnover."""

    dates: np.ndarray
    s: np.ndarray
    market_level: np.ndarray
    portfolio: np.ndarray
    cash: np.ndarray
    step_costs: np.ndarray        # cost paid at each step (first entry 0)
    c_0: float                    # shares per unit position
    cost_rate: float
    trades: int                   # total turnover sum |s_{t+1} - s_t|
    total_costs: float

    def validate(self) -> None:
        held = self.s * self.c_0 * self.market_level + self.cash
        scale = 1.0 + np.abs(self.portfolio)
        if np.max(np.abs(held - self.portfolio) / scale) > 1e-9:
            raise ValueError("ledger identity violated")
        if self.s[0] != 0:
            raise ValueError("ledger must start from a flat position")


def _portfolio_path(s: np.ndarray, level: np.ndarray, c_0: float,
                    cash0: float, cost_rate: float,
                    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized ledger recursion; returns (portfolio, cash, step_costs)."""
    ds = np.diff(s.astype(float))
    traded_value = ds * c_0 * level[1:]
    costs = np.abs(ds) * c_0 * level[1:] * (cost_rate / 2.0)
    cash = np.empty(s.size)
    cash[0] = cash0
    cash[1:] = cash0 - np.cumsum(traded_value + costs)
    portfolio = s * c_0 * level + cash
    step_costs = np.concatenate([[0.0], costs])
    return portfolio, cash, step_costs


def run_ledger(signal: TradeSignalSeries, market_level: np.ndarray,
               cash0: float = 100_000.0,
               cost_rate: float = 0.001) -> PortfolioLedger:
    """Run the portfolio ledger for a position path against the market
    level series.  The share count is fixed at inception as
    ``cash0 / market_level[0]`` and every unit of position change trades
    that many shares, paying ``cost_rate / 2`` of the traded value."""
    level = np.asarray(market_level, dtype=float).ravel()
    if level.size != signal.s.size:
        raise ValueError("market level must align with the position path")
    if np.any(level <= 0):
        raise ValueError("market level must be positive")
    if signal.s[0] != 0:
        raise ValueError("position path must start flat")
    if cost_rate < 0:
        raise ValueError("cost rate must be non-negative")
    c_0 = cash0 / level[0]
    portfolio, cash, step_costs = _portfolio_path(
        signal.s.astype(float), level, c_0, cash0, cost_rate)
    ledger = PortfolioLedger(
        signal.dates.copy(), signal.s.copy(), level, portfolio, cash,
        step_costs, c_0, cost_rate,
        int(np.abs(np.diff(signal.s)).sum()), float(step_costs.sum()))
    ledger.validate()
    return ledger


def ledger_frame(ledger: PortfolioLedger) -> pd.DataFrame:
    """Tabular view of the ledger, one row per day."""
    return pd.DataFrame({
        "date": ledger.dates,
        "signal": ledger.s,
        "market_level": ledger.market_level,
        "position_value": ledger.s * ledger.c_0 * ledger.market_level,
        "cash": ledger.cash,
        "portfolio": ledger.portfolio,
        "costs": ledger.step_costs,
    })


# ---------------------------------------------------------------------------
# performance metrics
# ---------------------------------------------------------------------------

_ANNUAL = 252.0


@dataclass
class PerformanceMetrics:
    """Annualized summary of a portfolio path (ratios are NaN when their
    denominator degenerates; the drawdown is in currency units)."""

    annual_return: float
    annual_volatility: float
    annual_negative_volatility: float
    sharpe: float
    sortino: float
    max_drawdown: float

    def as_dict(self) -> Dict[str, float]:
        return {
            "annual_return": self.annual_return,
            "annual_volatility": self.annual_volatility,
            "annual_negative_volatility": self.annual_negative_volatility,
            "sharpe": self.sharpe,
            "sortino": self.sortino,
            "max_drawdown": self.max_drawdown,
        }


def _ratio_metrics(portfolio: np.ndarray) -> Tuple[float, float]:
    """(Sharpe, Sortino) from a portfolio path; NaN when undefined."""
    if np.any(portfolio <= 0):
        return np.nan, np.nan
    log_ret = np.diff(np.log(portfolio))
    mean_ann = log_ret.mean() * _ANNUAL
    vol_ann = log_ret.std(ddof=1) * np.sqrt(_ANNUAL)
    downside = np.sqrt(np.mean(np.minimum(log_ret, 0.0) ** 2)
                       ) * np.sqrt(_ANNUAL)
    sharpe = mean_ann / vol_ann if vol_ann > 0 else np.nan
    if downside > 0:
        sortino = mean_ann / downside
    else:
        sortino = np.inf if mean_ann > 0 else np.nan
    return sharpe, sortino


def performance_metrics(ledger: PortfolioLedger) -> PerformanceMetrics:
    """Annualized return/volatility/downside-volatility, Sharpe, Sortino
    and the currency maximum drawdown of the ledger's portfolio path."""
    port = ledger.portfolio
    if port.size < 2:
        raise ValueError("need at least two portfolio values")
    if np.any(port <= 0):
        raise ValueError("portfolio value must stay positive for the "
                         "log-return metrics")
    log_ret = np.diff(np.log(port))
    mean_ann = float(log_ret.mean() * _ANNUAL)
    vol_ann = float(log_ret.std(ddof=1) * np.sqrt(_ANNUAL))
    downside = float(np.sqrt(np.mean(np.minimum(log_ret, 0.0) ** 2))
                     * np.sqrt(_ANNUAL))
    sharpe, sortino = _ratio_metrics(port)
    drawdown = float(np.max(np.maximum.accumulate(port) - port))
    return PerformanceMetrics(mean_ann, vol_ann, downside, sharpe, sortino,
                              drawdown)


# ---------------------------------------------------------------------------
# Monte Carlo significance
# ---------------------------------------------------------------------------

@dataclass
class MonteCarloReport:
    """Rank of the real strategy among shuffled-position strategies.

    ``sharpe_percentile`` is the fraction of simulated strategies the
    real one strictly beats (simulations with undefined ratios count as
    not beaten), and likewise for Sortino."""

    sharpe_real: float
    sortino_real: float
    sharpe_percentile: float
    sortino_percentile: float
    n_sims: int
    seed: int
    sell_count: int
    sharpe_sims: np.ndarray = field(repr=False)
    sortino_sims: np.ndarray = field(repr=False)


def _simulate_one(seed_seq: np.random.SeedSequence, s_tail: np.ndarray,
                  level: np.ndarray, c_0: float, cash0: float,
                  cost_rate: float) -> Tuple[float, float]:
    rng = np.random.default_rng(seed_seq)
    shuffled = np.concatenate([[0], rng.permutation(s_tail)])
    portfolio, _, _ = _portfolio_path(shuffled.astype(float), level, c_0,
                                      cash0, cost_rate)
    return _ratio_metrics(portfolio)


def mc_significance(signal: TradeSignalSeries, market_level: np.ndarray,
                    n_sims: int = 10_000, seed: int = 0,
                    cash0: float = 100_000.0, cost_rate: float = 0.001,
                    n_workers: Optional[int] = None) -> MonteCarloReport:
    """Compare the strategy with uniformly shuffled position paths.

    Every simulation permutes the post-inception positions (preserving
    the multiset, hence the sell count), reruns the ledger, and the
    report gives the fraction of simulations the real strategy strictly
    beats on the Sharpe and Sortino ratios.  Each simulation draws from
    its own spawned generator, so results do not depend on the worker
    count, only on the seed.
    """
    if signal.sell_count() < 1:
        raise ValueError("strategy has no sell to test")
    level = np.asarray(market_level, dtype=float).ravel()
    real = run_ledger(signal, level, cash0, cost_rate)
    sharpe_real, sortino_real = _ratio_metrics(real.portfolio)
    s_tail = signal.s[1:].copy()
    children = np.random.SeedSequence(seed).spawn(n_sims)
    args = [(child, s_tail, level, real.c_0, cash0, cost_rate)
            for child in children]
    if n_workers is None or n_workers <= 1:
        results = [_simulate_one(*a) for a in args]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(lambda a: _simulate_one(*a), args))
    sharpe_sims = np.array([r[0] for r in results])
    sortino_sims = np.array([r[1] for r in results])
    with np.errstate(invalid="ignore"):
        sharpe_pct = float(np.mean(sharpe_real > sharpe_sims))
        sortino_pct = float(np.mean(sortino_real > sortino_sims))
    return MonteCarloReport(sharpe_real, sortino_real, sharpe_pct,
                            sortino_pct, n_sims, seed,
                            signal.sell_count(), sharpe_sims, sortino_sims)
