"""Sentiment model wrappers and data plumbing.

Five filtering techniques over daily sentiment panels, all backed by the same
state-space engine:

* ``MLSS`` — q persistent common factors plus per-asset stationary AR(1)
  components, fitted separately per source (news, social).
* ``LSS``  — the univariate version fitted on the cross-sectional average.
* ``MLNSL`` — correlated random-walk-plus-noise panel filter.
* ``LNSL``  — univariate random-walk-plus-noise on the cross-sectional average.
* ``Obs``  — no filter, first differences of the raw average.

Each wrapper emits a fixed signal layout (one row per date after the first):
persistent components enter as first differences, transient components as the
cross-sectional average level.  The module also houses daily aggregation of
intraday scores, the missing-value policy, per-asset signal-to-noise ratios,
and a seeded synthetic-panel generator.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.signal import lfilter

from .em import (EmTrace, fit_em, mlnsl_constraints, mlss_constraints)
from .statespace import StateSpaceSpec, kalman_filter, kalman_smoother

__all__ = [
    "MODEL_TAGS", "SentimentPanel", "IntradaySentiment", "FilteredSignals",
    "aggregate_daily", "fill_missing", "fit_model", "signal_to_noise",
    "simulate_mlss", "demo_spec", "read_panel_csv", "write_panel_csv",
    "read_intraday_csv", "signals_frame",
]

MODEL_TAGS = ("MLSS", "LSS", "MLNSL", "LNSL", "Obs")


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------

@dataclass
class SentimentPanel:
    """Daily sentiment scores for K assets; NaN marks a missing day.

    ``synthetic=True`` relaxes the [-1, 1] bound (the linear-Gaussian model
    is unbounded; the bound is a property of real scored data)."""

    values: np.ndarray
    dates: np.ndarray
    assets: list[str]
    source: str = "news"
    synthetic: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.dates = np.asarray(self.dates)
        if self.values.ndim != 2:
            raise ValueError("values must be a T x K matrix")
        if len(self.dates) != self.values.shape[0]:
            raise ValueError("dates length must match rows of values")
        if len(self.assets) != self.values.shape[1]:
            raise ValueError("assets length must match columns of values")

    @property
    def n_obs(self) -> int:
        return self.values.shape[0]

    @property
    def n_assets(self) -> int:
        return self.values.shape[1]

    def missing_fraction(self) -> np.ndarray:
        return np.isnan(self.values).mean(axis=0)

    def validate(self) -> None:
        if len(self.dates) > 1 and not np.all(self.dates[1:] > self.dates[:-1]):
            raise ValueError("dates must be strictly increasing")
        finite = self.values[~np.isnan(self.values)]
        if np.isinf(finite).any():
            raise ValueError("values contain infinities")
        if not self.synthetic and finite.size and (
                finite.min() < -1.0 - 1e-12 or finite.max() > 1.0 + 1e-12):
            raise ValueError("sentiment scores must lie in [-1, 1] "
                             "(set synthetic=True to relax)")

    def copy(self) -> "SentimentPanel":
        return SentimentPanel(self.values.copy(), self.dates.copy(),
                              list(self.assets), self.source, self.synthetic)


@dataclass
class IntradaySentiment:
    """Minute-stamped sentiment scores with attention (buzz) weights.

    ``dates`` are calendar dates, ``minutes`` minute-of-day integers
    (0..1439).  Records after the closing hour belong to the next trading
    day's window."""

    dates: np.ndarray
    minutes: np.ndarray
    tickers: np.ndarray
    scores: np.ndarray
    buzz: np.ndarray
    cutoff_hour: int = 16

    def __post_init__(self):
        n = len(self.scores)
        for name in ("dates", "minutes", "tickers", "buzz"):
            if len(getattr(self, name)) != n:
                raise ValueError("intraday columns must have equal length")
        self.minutes = np.asarray(self.minutes, dtype=int)
        self.scores = np.asarray(self.scores, dtype=float)
        self.buzz = np.asarray(self.buzz, dtype=float)
        if (self.buzz < 0).any():
            raise ValueError("buzz weights must be nonnegative")
        if ((self.minutes < 0) | (self.minutes > 1439)).any():
            raise ValueError("minutes must lie in 0..1439")


@dataclass
class FilteredSignals:
    """Output of one filtering technique: the stacked signal matrix (one row
    per date after the first), its column labels, index lists of the
    persistent-difference and transient columns, the underlying smoothed
    components per source, and fit metadata."""

    tag: str
    signal: np.ndarray
    columns: list[str]
    dates: np.ndarray
    long_idx: list[int]
    short_idx: list[int]
    long_term: dict = field(default_factory=dict)
    short_term: dict = field(default_factory=dict)
    specs: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        expected = {"MLSS": None, "LSS": 4, "MLNSL": 2, "LNSL": 2, "Obs": 2}
        d = self.signal.shape[1]
        if self.tag in expected and expected[self.tag] is not None:
            if d != expected[self.tag]:
                raise ValueError(f"{self.tag} signal must have "
                                 f"{expected[self.tag]} columns, got {d}")
        if len(self.columns) != d:
            raise ValueError("column labels do not match signal width")
        if len(self.dates) != self.signal.shape[0]:
            raise ValueError("dates do not match signal rows")
        if set(self.long_idx) & set(self.short_idx):
            raise ValueError("a column cannot be both persistent and transient")


# ---------------------------------------------------------------------------
# aggregation and missing values
# ---------------------------------------------------------------------------

def aggregate_daily(intraday: IntradaySentiment,
                    cutoff_hour: int | None = None) -> SentimentPanel:
    """Buzz-weighted daily aggregation.

    Each record is assigned to the trading day whose closing hour ends its
    24-hour window: minutes at or before the cutoff belong to the same
    calendar date, later minutes to the next.  The daily score is
    sum(buzz * score) / sum(buzz); a day whose total buzz is zero (or that
    has no records) is missing, not zero.
    """
    sh = intraday.cutoff_hour if cutoff_hour is None else int(cutoff_hour)
    if not 0 <= sh <= 24:
        raise ValueError("cutoff hour must lie in 0..24")
    dates = np.asarray(intraday.dates, dtype="datetime64[D]")
    shift = intraday.minutes > sh * 60
    eff_dates = dates + shift.astype("timedelta64[D]")

    day_labels = np.unique(eff_dates)
    tickers = sorted(set(intraday.tickers.tolist()))
    t_index = {t: j for j, t in enumerate(tickers)}
    d_index = {d: i for i, d in enumerate(day_labels)}

    wsum = np.zeros((len(day_labels), len(tickers)))
    bsum = np.zeros_like(wsum)
    for d, tick, s, b in zip(eff_dates, intraday.tickers, intraday.scores,
                             intraday.buzz):
        i, j = d_index[d], t_index[tick]
        wsum[i, j] += b * s
        bsum[i, j] += b
    values = np.full(wsum.shape, np.nan)
    has_buzz = bsum > 0
    values[has_buzz] = wsum[has_buzz] / bsum[has_buzz]
    return SentimentPanel(values, day_labels, tickers)


def fill_missing(panel: SentimentPanel, window: int = 5,
                 max_missing: float = 0.10) -> SentimentPanel:
    """Replace each missing day by the rolling mean of the preceding
    ``window`` days (previously filled values roll forward); leading missing
    days are back-filled with the first observed value.  A column missing
    more than ``max_missing`` of its days is an error."""
    out = panel.copy()
    frac = out.missing_fraction()
    bad = np.flatnonzero(frac > max_missing)
    if bad.size:
        worst = bad[np.argmax(frac[bad])]
        raise ValueError(
            f"column '{out.assets[worst]}' is {frac[worst]:.1%} missing "
            f"(cap {max_missing:.0%})")
    v = out.values
    for j in range(v.shape[1]):
        col = v[:, j]
        obs = np.flatnonzero(~np.isnan(col))
        if obs.size == 0:
            raise ValueError(f"column '{out.assets[j]}' has no observations")
        col[:obs[0]] = col[obs[0]]
        for t in np.flatnonzero(np.isnan(col)):
            col[t] = col[max(0, t - window):t].mean()
    return out


# ---------------------------------------------------------------------------
# model fitting and signals
# ---------------------------------------------------------------------------

def _check_filled(panel: SentimentPanel, source: str) -> None:
    if np.isnan(panel.values).any():
        raise ValueError(f"{source} panel contains missing values; "
                         "apply fill_missing first")


def _smoothed_states(spec: StateSpaceSpec, values: np.ndarray) -> np.ndarray:
    filt = kalman_filter(spec, values)
    return kalman_smoother(spec, filt).smooth_mean[1:]


def _fit_source(values: np.ndarray, n_factors: int, cons, tol, max_iter):
    spec, trace = fit_em(values, n_factors, cons, tol=tol, max_iter=max_iter)
    states = _smoothed_states(spec, values)
    return spec, trace, states


def fit_model(tag: str, news: SentimentPanel, social: SentimentPanel,
              q_news: int = 2, q_social: int = 2, tol: float = 1e-3,
              max_iter: int = 500) -> FilteredSignals:
    """Fit one filtering technique to both sources and emit its signals.

    Panels must be complete (apply :func:`fill_missing` first) and share
    dates.  Persistent components enter the signal as first differences,
    transient components as cross-sectional average levels; every layout has
    one row per date after the first.
    """
    tag_norm = {t.lower(): t for t in MODEL_TAGS}.get(str(tag).lower())
    if tag_norm is None:
        raise ValueError(f"unknown model tag {tag!r}; expected one of "
                         f"{MODEL_TAGS}")
    _check_filled(news, "news")
    _check_filled(social, "social")
    if news.n_obs != social.n_obs or not np.array_equal(news.dates,
                                                        social.dates):
        raise ValueError("news and social panels must share dates")
    if news.n_obs < 3:
        raise ValueError("need at least 3 observations")

    dates = news.dates[1:]
    sources = {"news": news, "social": social}
    q_by_source = {"news": q_news, "social": q_social}
    cols: list[str] = []
    blocks: list[np.ndarray] = []
    long_idx: list[int] = []
    short_idx: list[int] = []
    long_term: dict = {}
    short_term: dict = {}
    specs: dict = {}
    traces: dict = {}

    def record_fit(src, spec, trace):
        specs[src] = spec
        traces[src] = trace
        if not trace.converged:
            warnings.warn(f"EM did not converge for source '{src}' "
                          f"(tag {tag_norm})", RuntimeWarning, stacklevel=3)

    if tag_norm in ("MLSS", "LSS"):
        for src, panel in sources.items():
            if tag_norm == "LSS":
                values = panel.values.mean(axis=1, keepdims=True)
                q = 1
            else:
                values = panel.values
                q = int(q_by_source[src])
            K = values.shape[1]
            if not 1 <= q <= K:
                raise ValueError(f"q={q} infeasible for K={K} ({src})")
            spec, trace, states = _fit_source(values, q,
                                              mlss_constraints(K, q),
                                              tol, max_iter)
            record_fit(src, spec, trace)
            long_term[src] = states[:, :q]
            short_term[src] = states[:, q:]
            dfac = np.diff(states[:, :q], axis=0)
            for blk in range(q):
                long_idx.append(len(cols))
                cols.append(f"dF_{src}_{blk + 1}" if q > 1 else f"dF_{src}")
            blocks.append(dfac)
        for src in sources:
            psi_bar = short_term[src].mean(axis=1)
            short_idx.append(len(cols))
            cols.append(f"psibar_{src}")
            blocks.append(psi_bar[1:, None])
    elif tag_norm in ("MLNSL", "LNSL"):
        for src, panel in sources.items():
            values = (panel.values.mean(axis=1, keepdims=True)
                      if tag_norm == "LNSL" else panel.values)
            K = values.shape[1]
            spec, trace, states = _fit_source(values, 0,
                                              mlnsl_constraints(K),
                                              tol, max_iter)
            record_fit(src, spec, trace)
            long_term[src] = states
            level_bar = states.mean(axis=1)
            long_idx.append(len(cols))
            cols.append(f"dFbar_{src}")
            blocks.append(np.diff(level_bar)[:, None])
    else:  # Obs: first differences of the cross-sectional average
        for src, panel in sources.items():
            s_bar = panel.values.mean(axis=1)
            cols.append(f"dSbar_{src}")
            blocks.append(np.diff(s_bar)[:, None])

    signal = np.hstack(blocks)
    out = FilteredSignals(tag_norm, signal, cols, dates, long_idx, short_idx,
                          long_term, short_term, specs, traces,
                          meta={"converged": {s: t.converged
                                              for s, t in traces.items()},
                                "q": {s: (specs[s].n_factors if s in specs
                                          else 0) for s in traces}})
    out.validate()
    return out


def implied_step_correlation(spec: StateSpaceSpec) -> np.ndarray:
    """Correlation matrix of one-step changes of the observed series implied
    by the fitted parameters.

    The change of series i stacks three independent pieces: persistent-factor
    innovations through the loadings (covariance Lambda Q_long Lambda'), the
    change of the transient component, and the difference of two observation
    noises (2R).  A stationary transient pair contributes
    Cov(psi)_ij (2 - phi_i - phi_j) with Cov(psi)_ij = Q_short_ij /
    (1 - phi_i phi_j); a random-walk pair (phi_i phi_j = 1) contributes
    Q_short_ij, the innovation covariance itself.
    """
    spec.validate()
    phi = spec.phi_diag
    q_short = spec.q_short
    outer_phi = np.outer(phi, phi)
    random_walk = np.abs(1.0 - outer_phi) < 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        step = q_short * (2.0 - phi[:, None] - phi[None, :]) / (1.0 - outer_phi)
    step[random_walk] = q_short[random_walk]
    if spec.n_factors:
        step = step + spec.lam @ spec.q_long @ spec.lam.T
    step = step + 2.0 * spec.r
    scale = np.sqrt(np.diag(step))
    if (scale <= 0).any():
        raise ValueError("implied step variance must be positive")
    corr = step / np.outer(scale, scale)
    np.fill_diagonal(corr, 1.0)
    return corr


def signal_to_noise(spec: StateSpaceSpec, tag: str) -> np.ndarray:
    """Per-asset ratio of modeled signal-innovation variance to observation
    noise: (sum_j Lambda(i,j)^2 + Q_short(i,i)) / R(i,i) for the factor
    models, Q(i,i)/R(i,i) for the random-walk filters."""
    tag_l = str(tag).lower()
    r_diag = np.diag(spec.r)
    if (r_diag <= 0).any():
        raise ValueError("signal-to-noise undefined: zero observation-noise "
                         "variance")
    if tag_l in ("mlss", "lss"):
        num = (spec.lam ** 2).sum(axis=1) + np.diag(spec.q_short)
    elif tag_l in ("mlnsl", "lnsl"):
        num = np.diag(spec.q_short)
    else:
        raise ValueError(f"signal-to-noise undefined for tag {tag!r}")
    return num / r_diag


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def demo_spec(n_series: int = 6, n_factors: int = 2,
              scale: float = 0.19) -> StateSpaceSpec:
    """The synthetic archetype used by the demo pipeline and the recovery
    tests: moderate factor loadings with mixed signs (identification zeros in
    place), short-term persistence spread over [0.35, 0.65], and low
    observation noise.  ``scale`` sets the overall magnitude of the observed
    series (loadings scale linearly, innovation variances quadratically;
    persistence and signal-to-noise ratios are unaffected).  The default
    matches the size of scored sentiment data, whose daily moves live well
    inside [-1, 1]."""
    K, q = int(n_series), int(n_factors)
    if not 1 <= q <= K:
        raise ValueError("need 1 <= n_factors <= n_series")
    c = float(scale)
    rs = np.random.default_rng(2024)
    lam_left = (rs.uniform(0.3, 0.6, size=(K, q))
                * rs.choice([-1.0, 1.0], size=(K, q)))
    for i in range(min(K, q)):
        lam_left[i, i + 1:] = 0.0
    lam = np.hstack([lam_left * c, np.eye(K)])
    phi = np.eye(K + q)
    phi[q:, q:] = np.diag(np.linspace(0.35, 0.65, K))
    qt = np.eye(K + q)
    qt[q:, q:] = np.diag(rs.uniform(0.8, 1.2, size=K) * c * c)
    r = np.diag(rs.uniform(0.05, 0.12, size=K) * c * c)
    return StateSpaceSpec(lam, phi, qt, r, np.zeros(K + q), np.eye(K + q),
                          q, K)


def simulate_mlss(spec: StateSpaceSpec, n_obs: int, seed: int,
                  assets: list[str] | None = None, source: str = "news",
                  start: str = "2015-01-02"):
    """Draw a synthetic sentiment panel from a state-space spec.

    The initial state is N(a, sigma0); persistent factors accumulate their
    innovations, transient components follow the AR recursion (applied with a
    linear filter), and observation noise is added on top.  Returns
    ``(SentimentPanel, truth)`` where ``truth`` carries the latent factor
    and transient paths.  Values are unbounded (the panel is flagged
    synthetic).  Same seed, same panel.
    """
    spec.validate()
    n, K, q = spec.dim_state, spec.n_series, spec.n_factors
    if n_obs < 1:
        raise ValueError("n_obs must be positive")
    rng = np.random.default_rng(seed)

    w0, v0 = np.linalg.eigh(0.5 * (spec.sigma0 + spec.sigma0.T))
    s0 = (v0 * np.sqrt(np.clip(w0, 0.0, None))) @ v0.T
    f0 = spec.a + s0 @ rng.normal(size=n)

    wq, vq = np.linalg.eigh(0.5 * (spec.q_tilde + spec.q_tilde.T))
    sq = (vq * np.sqrt(np.clip(wq, 0.0, None))) @ vq.T
    shocks = rng.normal(size=(n_obs, n)) @ sq.T

    factors = f0[:q] + np.cumsum(shocks[:, :q], axis=0) if q else \
        np.zeros((n_obs, 0))
    phi_d = np.diag(spec.phi_tilde)[q:]
    transient = np.empty((n_obs, K))
    for i in range(K):
        # psi_t = phi_i psi_{t-1} + u_t, seeded with the drawn initial state
        transient[:, i] = lfilter([1.0], [1.0, -phi_d[i]], shocks[:, q + i],
                                  zi=np.array([phi_d[i] * f0[q + i]]))[0]
    states = np.hstack([factors, transient])
    noise = rng.normal(size=(n_obs, K)) * np.sqrt(np.diag(spec.r))
    values = states @ spec.lambda_tilde.T + noise

    if assets is None:
        assets = [f"A{i + 1:02d}" for i in range(K)]
    dates = np.busday_offset(np.datetime64(start, "D"), np.arange(n_obs),
                             roll="forward")
    panel = SentimentPanel(values, dates, assets, source=source,
                           synthetic=True)
    truth = {"factors": factors, "transient": transient, "states": states,
             "initial_state": f0}
    return panel, truth


# ---------------------------------------------------------------------------
# CSV interfaces
# ---------------------------------------------------------------------------

def read_panel_csv(path, source: str = "news",
                   synthetic: bool = False) -> SentimentPanel:
    """Read `date,TICKER1,...` with ISO dates; empty cells are missing."""
    frame = pd.read_csv(path)
    if frame.shape[1] < 2 or frame.columns[0].lower() != "date":
        raise ValueError("panel CSV must start with a 'date' column")
    dates = pd.to_datetime(frame.iloc[:, 0]).to_numpy(dtype="datetime64[D]")
    assets = [str(c) for c in frame.columns[1:]]
    values = frame.iloc[:, 1:].to_numpy(dtype=float)
    panel = SentimentPanel(values, dates, assets, source=source,
                           synthetic=synthetic)
    panel.validate()
    return panel


def write_panel_csv(panel: SentimentPanel, path) -> None:
    frame = pd.DataFrame(panel.values, columns=panel.assets)
    frame.insert(0, "date", pd.to_datetime(panel.dates))
    frame.to_csv(path, index=False, date_format="%Y-%m-%d")


def read_intraday_csv(path, cutoff_hour: int = 16) -> IntradaySentiment:
    """Read `date,minute,ticker,score,buzz`; minute is `HH:MM` or an
    integer minute-of-day."""
    frame = pd.read_csv(path)
    required = ["date", "minute", "ticker", "score", "buzz"]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise ValueError(f"intraday CSV lacks columns: {missing}")
    raw_minute = frame["minute"]
    if raw_minute.dtype == object:
        parts = raw_minute.astype(str).str.split(":", expand=True)
        minutes = parts[0].astype(int) * 60 + parts[1].astype(int)
    else:
        minutes = raw_minute.astype(int)
    return IntradaySentiment(
        pd.to_datetime(frame["date"]).to_numpy(dtype="datetime64[D]"),
        minutes.to_numpy(), frame["ticker"].to_numpy(dtype=object),
        frame["score"].to_numpy(dtype=float),
        frame["buzz"].to_numpy(dtype=float), cutoff_hour=cutoff_hour)


def signals_frame(fs: FilteredSignals) -> pd.DataFrame:
    """Signals as a DataFrame with a leading date column."""
    frame = pd.DataFrame(fs.signal, columns=fs.columns)
    frame.insert(0, "date", pd.to_datetime(fs.dates))
    return frame
