"""Market-structure statistics and quantile-regression inference.

Relates filtered sentiment to returns: a PCA market factor, an
Engle-Granger cointegration check, regressions linking correlation
structures, and pinball-loss quantile fits with likelihood-ratio-style
significance tests for the long/short signal blocks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats as sps
from scipy.linalg import qr as _qr
from scipy.optimize import linprog

from .models import FilteredSignals

__all__ = [
    "QUANTILE_GRID",
    "MarketFactor",
    "EngleGrangerResult",
    "OLSRegression",
    "CorrelationStudy",
    "QuantileFit",
    "LongShortTests",
    "MultiLagResult",
    "vechl",
    "unvechl",
    "pinball_loss",
    "pca_market",
    "one_factor_residual_correlation",
    "engle_granger",
    "correlation_regression",
    "quantile_fit",
    "sparsity_hall_sheather",
    "lt_test",
    "long_short_decomposition_tests",
    "multi_lag_test",
    "r1_table",
    "significance_stars",
]

#: Default quantile levels for tabulated results.
QUANTILE_GRID = (0.01, 0.05, 0.10, 0.33, 0.50, 0.66, 0.90, 0.95, 0.99)


# ---------------------------------------------------------------------------
# small numeric helpers
# ---------------------------------------------------------------------------

def vechl(mat: np.ndarray) -> np.ndarray:
    """Stack the strictly-above-diagonal entries of a square matrix into a
    vector, row-major: (0,1), (0,2), ..., (1,2), ...  Length K(K-1)/2."""
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError("vechl expects a square matrix")
    iu, ju = np.triu_indices(mat.shape[0], k=1)
    return mat[iu, ju].copy()


def unvechl(vec: np.ndarray, diag: float | np.ndarray = 1.0) -> np.ndarray:
    """Inverse of :func:`vechl`: embed a stacked off-diagonal vector into a
    symmetric matrix with the given diagonal (default unit diagonal)."""
    vec = np.asarray(vec, dtype=float).ravel()
    k = int(round((1.0 + np.sqrt(1.0 + 8.0 * vec.size)) / 2.0))
    if k * (k - 1) // 2 != vec.size:
        raise ValueError(f"length {vec.size} is not K(K-1)/2 for integer K")
    out = np.zeros((k, k))
    iu, ju = np.triu_indices(k, k=1)
    out[iu, ju] = vec
    out += out.T
    out[np.diag_indices(k)] = diag
    return out


def pinball_loss(u: np.ndarray, tau: float) -> np.ndarray:
    """Quantile check loss rho_tau(u) = u * (tau - 1{u < 0}), elementwise."""
    u = np.asarray(u, dtype=float)
    return u * (tau - (u < 0.0))


def significance_stars(p_value: float) -> str:
    """Conventional significance markers at 1% / 5% / 10%."""
    if p_value < 0.01:
        return "***"
    if p_value < 0.05:
        return "**"
    if p_value < 0.10:
        return "*"
    return ""


def _ols(y: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray,
                                                float, float, float]:
    """OLS of y on [1, x]; returns (coef, residuals, r2, f_stat, p_value).
    The F statistic tests all slope coefficients jointly against zero."""
    y = np.asarray(y, dtype=float).ravel()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] != y.size:
        x = x.T
    n, k = x.shape
    design = np.column_stack([np.ones(n), x])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    tss = float(np.sum((y - y.mean()) ** 2))
    rss = float(resid @ resid)
    r2 = 1.0 - rss / tss if tss > 0 else 0.0
    dfe = n - k - 1
    if dfe <= 0:
        raise ValueError("not enough observations for the regression")
    if rss <= 1e-14 * max(tss, 1.0):
        f_stat, p_value = np.inf, 0.0
    else:
        f_stat = (r2 / k) / ((1.0 - r2) / dfe)
        p_value = float(sps.f.sf(f_stat, k, dfe))
    return coef, resid, r2, float(f_stat), p_value


# ---------------------------------------------------------------------------
# PCA market factor
# ---------------------------------------------------------------------------

@dataclass
class MarketFactor:
    """First principal components of the return correlation matrix.

    ``loadings`` has one orthonormal row per retained component;
    ``factor_returns`` are the loadings applied to demeaned returns and
    ``factor_level`` is the corresponding price-level series (loadings
    applied to log-prices when available, otherwise cumulated factor
    returns)."""

    loadings: np.ndarray          # (q_mrk, K)
    factor_returns: np.ndarray    # (T, q_mrk)
    factor_level: np.ndarray      # (T, q_mrk)
    explained_variance: np.ndarray  # (K,) eigenvalues, non-increasing
    q_mrk: int

    def validate(self) -> None:
        gram = self.loadings @ self.loadings.T
        if not np.allclose(gram, np.eye(self.q_mrk), atol=1e-10):
            raise ValueError("loading rows must be orthonormal")
        if np.any(np.diff(self.explained_variance) > 1e-10):
            raise ValueError("explained variances must be non-increasing")


def pca_market(returns: np.ndarray, q_mrk: int = 1,
               prices: Optional[np.ndarray] = None) -> MarketFactor:
    """Extract market factors as the leading eigenvectors of the return
    correlation matrix.

    ``returns`` is T x K; it is demeaned internally and the correlation
    (not covariance) matrix is decomposed, so every asset enters with unit
    variance.  If ``prices`` (T x K, log scale) is given, the factor level
    is the loadings applied to it; otherwise the cumulated factor returns
    are used as the level series.
    """
    returns = np.asarray(returns, dtype=float)
    if returns.ndim != 2:
        raise ValueError("returns must be a T x K matrix")
    n_obs, n_assets = returns.shape
    if n_obs <= n_assets:
        raise ValueError("need more observations than assets")
    if not (1 <= q_mrk <= n_assets):
        raise ValueError("q_mrk out of range")
    demeaned = returns - returns.mean(axis=0)
    sd = demeaned.std(axis=0)
    if np.any(sd <= 0):
        raise ValueError("constant return series")
    corr = np.corrcoef(demeaned.T)
    eigval, eigvec = np.linalg.eigh(corr)
    order = np.argsort(eigval)[::-1]
    eigval, eigvec = eigval[order], eigvec[:, order]
    if eigval[-1] < 1e-10 * eigval[0]:
        raise ValueError("correlation matrix is rank-deficient")
    loadings = eigvec[:, :q_mrk].T
    # fix the sign so each component loads positively on average
    signs = np.sign(loadings.sum(axis=1))
    signs[signs == 0] = 1.0
    loadings = loadings * signs[:, None]
    factor_returns = demeaned @ loadings.T
    if prices is not None:
        prices = np.asarray(prices, dtype=float)
        if prices.shape != returns.shape:
            raise ValueError("prices must have the same shape as returns")
        factor_level = prices @ loadings.T
    else:
        factor_level = np.cumsum(returns @ loadings.T, axis=0)
    out = MarketFactor(loadings, factor_returns, factor_level, eigval, q_mrk)
    out.validate()
    return out


def one_factor_residual_correlation(
        returns: np.ndarray, factor_returns: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Regress each return series on the market factor(s) and correlate the
    residuals.  Returns (residual correlation K x K, intercepts, betas)."""
    returns = np.asarray(returns, dtype=float)
    fac = np.asarray(factor_returns, dtype=float)
    if fac.ndim == 1:
        fac = fac[:, None]
    if fac.shape[0] != returns.shape[0]:
        raise ValueError("factor series length must match returns")
    n_assets = returns.shape[1]
    alphas = np.zeros(n_assets)
    betas = np.zeros((n_assets, fac.shape[1]))
    resid = np.zeros_like(returns)
    for i in range(n_assets):
        coef, res, *_ = _ols(returns[:, i], fac)
        alphas[i], betas[i] = coef[0], coef[1:]
        resid[:, i] = res
    return np.corrcoef(resid.T), alphas, betas


# ---------------------------------------------------------------------------
# Engle-Granger cointegration
# ---------------------------------------------------------------------------

# Residual-based cointegration critical values for two variables with a
# constant and no trend (MacKinnon response surface): value at level L is
# b0 + b1/T + b2/T^2.
_EG_CRIT = {
    0.01: (-3.89644, -10.9519, -22.527),
    0.05: (-3.33613, -6.1101, -6.823),
    0.10: (-3.04445, -4.2412, -2.720),
}


@dataclass
class EngleGrangerResult:
    """Two-step residual-based cointegration test between two series."""

    alpha: float              # intercept of the cointegrating regression
    coint_beta: float         # slope of y on x
    adf_stat: float           # t-statistic of the unit-root coefficient
    crit_values: Dict[float, float]   # level -> critical value
    p_band: str               # "<0.01", "0.01-0.05", "0.05-0.10", ">0.10"
    reject_flag: bool         # rejection at the 5% level
    lags: int                 # augmentation order used in the ADF step
    residuals: np.ndarray = field(repr=False)


def _adf_tstat(series: np.ndarray, lags: int) -> float:
    """t-statistic of gamma in  d e_t = c + gamma e_{t-1} + sum d e_{t-i}."""
    diff = np.diff(series)
    n_eff = diff.size - lags
    if n_eff < lags + 4:
        raise ValueError("series too short for the chosen lag order")
    y = diff[lags:]
    cols = [np.ones(n_eff), series[lags:-1]]
    for i in range(1, lags + 1):
        cols.append(diff[lags - i:diff.size - i])
    design = np.column_stack(cols)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    dof = n_eff - design.shape[1]
    sigma2 = float(resid @ resid) / dof
    xtx_inv = np.linalg.inv(design.T @ design)
    se = np.sqrt(sigma2 * xtx_inv[1, 1])
    return float(coef[1] / se)


def engle_granger(x: np.ndarray, y: np.ndarray) -> EngleGrangerResult:
    """Test whether ``y`` and ``x`` share a common stochastic trend.

    Step 1 regresses y on x with an intercept; step 2 runs an augmented
    Dickey-Fuller regression on the residuals with the deterministic lag
    order floor(12 * (T/100)^(1/4)).  The statistic is compared with
    finite-sample critical values for the residual-based no-trend case.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size:
        raise ValueError("series must have equal length")
    n_obs = x.size
    if n_obs < 50:
        raise ValueError("need at least 50 observations")
    if np.std(x) == 0 or np.std(y) == 0:
        raise ValueError("constant series cannot be tested")
    coef, resid, *_ = _ols(y, x)
    lags = int(np.floor(12.0 * (n_obs / 100.0) ** 0.25))
    crit = {lvl: b0 + b1 / n_obs + b2 / n_obs ** 2
            for lvl, (b0, b1, b2) in _EG_CRIT.items()}
    if np.std(resid) <= 1e-12 * max(1.0, np.std(y)):
        # exact linear relation: degenerate, strongest possible rejection
        stat = -np.inf
    else:
        stat = _adf_tstat(resid, lags)
    if stat < crit[0.01]:
        band = "<0.01"
    elif stat < crit[0.05]:
        band = "0.01-0.05"
    elif stat < crit[0.10]:
        band = "0.05-0.10"
    else:
        band = ">0.10"
    return EngleGrangerResult(float(coef[0]), float(coef[1]), stat, crit,
                              band, bool(stat < crit[0.05]), lags, resid)


# ---------------------------------------------------------------------------
# correlation-structure regressions
# ---------------------------------------------------------------------------

@dataclass
class OLSRegression:
    """Summary of one intercept-plus-slope regression on stacked pairs."""

    alpha: float
    beta: float
    r2: float
    f_stat: float
    p_value: float
    n_pairs: int


@dataclass
class CorrelationStudy:
    """Regressions of the return-correlation structure on model-implied
    sentiment-correlation structures, over all asset pairs and over
    same-sector pairs, optionally repeated against the correlation of
    one-factor return residuals."""

    c_ret: np.ndarray
    c_models: Dict[str, np.ndarray]
    c_ret_resid: Optional[np.ndarray]
    sectors: Optional[List[str]]
    regressions: Dict[Tuple[str, str, str], OLSRegression]

    def table(self) -> pd.DataFrame:
        rows = []
        for (target, model, subset), reg in self.regressions.items():
            rows.append({"target": target, "model": model, "pairs": subset,
                         "alpha": reg.alpha, "beta": reg.beta, "r2": reg.r2,
                         "f_stat": reg.f_stat, "p_value": reg.p_value,
                         "n_pairs": reg.n_pairs})
        return pd.DataFrame(rows)


def _check_correlation(name: str, mat: np.ndarray, k: int) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.shape != (k, k):
        raise ValueError(f"{name}: matrices must share the asset ordering "
                         f"and count (got {mat.shape}, expected {(k, k)})")
    if not np.allclose(mat, mat.T, atol=1e-8):
        raise ValueError(f"{name}: correlation matrix must be symmetric")
    if not np.allclose(np.diag(mat), 1.0, atol=1e-8):
        raise ValueError(f"{name}: correlation matrix needs a unit diagonal")
    return mat


def correlation_regression(
        c_ret: np.ndarray,
        c_models: Dict[str, np.ndarray],
        sectors: Optional[Sequence[str]] = None,
        c_ret_resid: Optional[np.ndarray] = None,
) -> CorrelationStudy:
    """Regress stacked return correlations on stacked model correlations.

    For every model matrix, fits  vechl(C_target) = a + b * vechl(C_model)
    by OLS and records R^2 and the F test of b = 0.  Targets are the raw
    return correlations and, when given, the one-factor residual return
    correlations; pair sets are all pairs and, when a sector map is given,
    pairs of assets in the same sector.
    """
    c_ret = np.asarray(c_ret, dtype=float)
    k = c_ret.shape[0]
    c_ret = _check_correlation("c_ret", c_ret, k)
    models = {name: _check_correlation(name, mat, k)
              for name, mat in c_models.items()}
    targets = {"ret": c_ret}
    if c_ret_resid is not None:
        targets["ret_resid"] = _check_correlation("c_ret_resid",
                                                  c_ret_resid, k)
    subsets: Dict[str, np.ndarray] = {
        "all": np.ones(k * (k - 1) // 2, dtype=bool)}
    sector_list: Optional[List[str]] = None
    if sectors is not None:
        sector_list = [str(s) for s in sectors]
        if len(sector_list) != k:
            raise ValueError("sector map must have one entry per asset")
        iu, ju = np.triu_indices(k, k=1)
        mask = np.array([sector_list[i] == sector_list[j]
                         for i, j in zip(iu, ju)])
        if mask.sum() < 3:
            raise ValueError("too few same-sector pairs to regress")
        subsets["same_sector"] = mask

    regressions: Dict[Tuple[str, str, str], OLSRegression] = {}
    for tname, tmat in targets.items():
        t_vec = vechl(tmat)
        for mname, mmat in models.items():
            m_vec = vechl(mmat)
            for sname, mask in subsets.items():
                coef, _, r2, f_stat, p = _ols(t_vec[mask], m_vec[mask])
                regressions[(tname, mname, sname)] = OLSRegression(
                    float(coef[0]), float(coef[1]), r2, f_stat, p,
                    int(mask.sum()))
    return CorrelationStudy(c_ret, models, targets.get("ret_resid"),
                            sector_list, regressions)


# ---------------------------------------------------------------------------
# quantile regression
# ---------------------------------------------------------------------------

@dataclass
class QuantileFit:
    """Pinball-loss fit of a conditional quantile with goodness of fit.

    ``v_hat`` is the minimized objective, ``v_tilde`` the intercept-only
    objective, ``r1 = 1 - v_hat / v_tilde`` the local goodness-of-fit
    measure, and ``lt_stat`` the likelihood-ratio-style statistic for all
    slope coefficients jointly (chi-square with one degree of freedom per
    slope)."""

    tau: float
    alpha: float
    beta: np.ndarray
    v_hat: float
    v_tilde: float
    r1: float
    lt_stat: float
    p_value: float
    sparsity: float
    n_obs: int
    residuals: np.ndarray = field(repr=False)

    def validate(self) -> None:
        if self.v_hat > self.v_tilde + 1e-8 * (1.0 + self.v_tilde):
            raise ValueError("unrestricted objective exceeds restricted one")
        if not (-1e-12 <= self.r1 <= 1.0 + 1e-12):
            raise ValueError("r1 must lie in [0, 1]")
        if self.lt_stat < 0:
            raise ValueError("test statistic must be non-negative")


def _frisch_newton(design: np.ndarray, y: np.ndarray, tau: float,
                   tol: float = 1e-8, max_iter: int = 60,
                   ) -> Optional[np.ndarray]:
    """Interior-point solve of the quantile LP in its bounded dual form:
    max y'a subject to design'a = (1-tau) design'1 and a in [0,1]^n.
    Returns the coefficient vector, or None if it fails to converge."""
    n, p = design.shape
    c = -y
    a = np.full(n, 1.0 - tau)
    s = 1.0 - a
    b = design.T @ a
    w, *_ = np.linalg.lstsq(design, c, rcond=None)
    d = c - design @ w
    delta = 1e-4 * (1.0 + np.abs(d).max())
    z = np.maximum(d, 0.0) + delta
    v = z - d

    def steplen(cur: np.ndarray, step: np.ndarray) -> float:
        neg = step < 0
        if not neg.any():
            return 1.0
        return min(1.0, 0.9995 * np.min(-cur[neg] / step[neg]))

    for _ in range(max_iter):
        gap = float(a @ z + s @ v)
        primal = float(c @ a)
        dual = float(b @ w - v.sum())
        if abs(primal - dual) / (1.0 + abs(primal)) < tol:
            return -w
        mu = gap / (2.0 * n)
        r_dual = c - design @ w - z + v
        r_primal = b - design.T @ a

        def solve_step(gamma_az: np.ndarray, gamma_sv: np.ndarray):
            dmat = 1.0 / (z / a + v / s)
            rhs_a = r_dual - gamma_az / a + z + gamma_sv / s - v
            lhs = design.T @ (dmat[:, None] * design)
            rhs = r_primal + design.T @ (dmat * rhs_a)
            try:
                dw = np.linalg.solve(lhs, rhs)
            except np.linalg.LinAlgError:
                dw, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
            da = dmat * (design @ dw - rhs_a)
            ds = -da
            dz = gamma_az / a - z - (z / a) * da
            dv = gamma_sv / s - v - (v / s) * ds
            return dw, da, ds, dz, dv

        # affine-scaling predictor
        zeros = np.zeros(n)
        dw_a, da_a, ds_a, dz_a, dv_a = solve_step(zeros, zeros)
        ap = min(steplen(a, da_a), steplen(s, ds_a))
        ad = min(steplen(z, dz_a), steplen(v, dv_a))
        gap_aff = float((a + ap * da_a) @ (z + ad * dz_a)
                        + (s + ap * ds_a) @ (v + ad * dv_a))
        sigma = (gap_aff / gap) ** 3 if gap > 0 else 0.0
        # centering + Mehrotra correction
        gamma_az = sigma * mu - da_a * dz_a
        gamma_sv = sigma * mu - ds_a * dv_a
        dw, da, ds, dz, dv = solve_step(gamma_az, gamma_sv)
        ap = min(steplen(a, da), steplen(s, ds))
        ad = min(steplen(z, dz), steplen(v, dv))
        a, s = a + ap * da, s + ap * ds
        w, z, v = w + ad * dw, z + ad * dz, v + ad * dv
    return None


def _quantile_lp(design: np.ndarray, y: np.ndarray, tau: float) -> np.ndarray:
    """Primal LP fallback (split positive/negative residuals, HiGHS)."""
    n, p = design.shape
    cost = np.concatenate([np.zeros(p), np.full(n, tau),
                           np.full(n, 1.0 - tau)])
    a_eq = np.hstack([design, np.eye(n), -np.eye(n)])
    bounds = [(None, None)] * p + [(0, None)] * (2 * n)
    res = linprog(cost, A_eq=a_eq, b_eq=y, bounds=bounds, method="highs")
    if not res.success:
        raise RuntimeError(f"quantile LP failed: {res.message}")
    return res.x[:p]


def _intercept_only(y: np.ndarray, tau: float) -> Tuple[float, float]:
    """Closed-form intercept-only fit: any empirical tau-quantile minimizes
    the pinball sum; the lower quantile convention is used."""
    alpha = float(np.quantile(y, tau, method="inverted_cdf"))
    value = float(pinball_loss(y - alpha, tau).sum())
    return alpha, value


def sparsity_hall_sheather(residuals: np.ndarray, tau: float,
                           alpha: float = 0.05) -> float:
    """Difference-quotient estimate of the quantile density ("sparsity")
    s(tau) = 1/f(F^-1(tau)) from residuals, with the Hall-Sheather
    bandwidth; the window is clipped to the observable range."""
    residuals = np.asarray(residuals, dtype=float).ravel()
    n = residuals.size
    if n < 10:
        raise ValueError("too few residuals for a sparsity estimate")
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must be inside (0, 1)")
    x0 = sps.norm.ppf(tau)
    f0 = sps.norm.pdf(x0)
    band = (n ** (-1.0 / 3.0) * sps.norm.ppf(1.0 - alpha / 2.0) ** (2.0 / 3.0)
            * ((1.5 * f0 ** 2) / (2.0 * x0 ** 2 + 1.0)) ** (1.0 / 3.0))
    lo = max(tau - band, 0.5 / n)
    hi = min(tau + band, 1.0 - 0.5 / n)
    if hi <= lo:
        raise ValueError("degenerate sparsity window")
    q_lo, q_hi = np.quantile(residuals, [lo, hi])
    return float((q_hi - q_lo) / (hi - lo))


def quantile_fit(y: np.ndarray, x: Optional[np.ndarray],
                 tau: float) -> QuantileFit:
    """Fit the conditional tau-quantile of y on regressors x by minimizing
    the pinball loss.

    ``x`` may be None or have zero columns for an intercept-only fit.  The
    result carries the minimized objective, the intercept-only objective,
    the local goodness-of-fit r1 and a joint significance statistic for
    the slopes.  Collinear designs are refused.
    """
    y = np.asarray(y, dtype=float).ravel()
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must be inside (0, 1)")
    if not np.all(np.isfinite(y)):
        raise ValueError("y must be finite")
    if x is None:
        x = np.empty((y.size, 0))
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != y.size:
        raise ValueError("x and y must have the same number of rows")
    if not np.all(np.isfinite(x)):
        raise ValueError("regressors must be finite")
    n, n_slopes = x.shape
    if n <= n_slopes + 1:
        raise ValueError("need more observations than parameters")

    alpha_tilde, v_tilde = _intercept_only(y, tau)
    if n_slopes == 0:
        resid = y - alpha_tilde
        return QuantileFit(tau, alpha_tilde, np.empty(0), v_tilde, v_tilde,
                           0.0, 0.0, 1.0, np.nan, n, resid)

    design = np.column_stack([np.ones(n), x])
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise ValueError("collinear regressors: drop redundant columns")
    coef = _frisch_newton(design, y, tau)
    if coef is None:
        coef = _quantile_lp(design, y, tau)
    resid = y - design @ coef
    v_hat = float(pinball_loss(resid, tau).sum())
    v_hat = min(v_hat, v_tilde)  # nested by construction; guard roundoff
    r1 = 1.0 - v_hat / v_tilde if v_tilde > 0 else 0.0
    if n >= 10:
        spar = sparsity_hall_sheather(resid, tau)
        if spar <= 0:
            raise ValueError("non-positive sparsity estimate")
        stat = 2.0 * (v_tilde - v_hat) / (tau * (1.0 - tau) * spar)
        p_value = float(sps.chi2.sf(stat, n_slopes))
    else:  # too few points for a sparsity estimate; no significance test
        spar, stat, p_value = np.nan, 0.0, np.nan
    fit = QuantileFit(tau, float(coef[0]), coef[1:].copy(), v_hat, v_tilde,
                      max(r1, 0.0), max(stat, 0.0), p_value, spar, n, resid)
    fit.validate()
    return fit


def lt_test(fit: QuantileFit, restricted_v: Optional[float] = None,
            df: Optional[int] = None,
            sparsity: Optional[float] = None) -> Tuple[float, float]:
    """Likelihood-ratio-style quantile test: compares the restricted
    objective against ``fit.v_hat`` and refers
    2 (V_restricted - V_hat) / (tau (1 - tau) s(tau)) to chi-square(df).

    Defaults test all slopes of ``fit`` against zero using its
    intercept-only objective and a sparsity estimated from its residuals.
    """
    if restricted_v is None:
        restricted_v = fit.v_tilde
    if df is None:
        df = fit.beta.size
    if df <= 0:
        raise ValueError("df must be a positive number of tested slopes")
    if restricted_v < fit.v_hat - 1e-8 * (1.0 + abs(fit.v_hat)):
        raise ValueError("restricted objective must be >= unrestricted")
    if sparsity is None:
        sparsity = sparsity_hall_sheather(fit.residuals, fit.tau)
    if sparsity <= 0:
        raise ValueError("non-positive sparsity estimate")
    stat = 2.0 * max(restricted_v - fit.v_hat, 0.0) / (
        fit.tau * (1.0 - fit.tau) * sparsity)
    return stat, float(sps.chi2.sf(stat, df))


# ---------------------------------------------------------------------------
# long/short decomposition and multi-lag tests
# ---------------------------------------------------------------------------

def _nonconstant(x: np.ndarray) -> np.ndarray:
    """Mask of columns that actually vary (degenerate columns cannot move
    the objective and would make the design collinear)."""
    return x.std(axis=0) > 1e-12


def _reduced_design(x: np.ndarray) -> np.ndarray:
    """A maximal subset of columns that is linearly independent of the
    intercept and of each other.

    Lag stacks of smoothed components can be exactly collinear (the smoother
    is one linear filter of the data, so differences of its lags reproduce
    other columns); the pinball optimum only sees the column span, so the
    reduction leaves every fitted objective unchanged while the nominal
    degrees of freedom stay with the caller.
    """
    idx = np.where(_nonconstant(x))[0]
    if idx.size == 0:
        return x[:, idx]
    centered = x[:, idx] - x[:, idx].mean(axis=0)
    _, r, piv = _qr(centered, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(centered.shape) * np.finfo(float).eps
    rank = int((diag > tol).sum())
    keep = np.sort(piv[:rank])
    return x[:, idx[keep]]


def _lagged_pairs(returns: np.ndarray, signal: np.ndarray,
                  h: int) -> Tuple[np.ndarray, np.ndarray]:
    returns = np.asarray(returns, dtype=float).ravel()
    if returns.size != signal.shape[0]:
        raise ValueError("returns must align one-to-one with signal rows")
    if h < 0:
        raise ValueError("lag must be non-negative")
    if h == 0:
        return returns, signal
    return returns[h:], signal[:-h]


@dataclass
class LongShortTests:
    """Joint significance of the persistent-trend block and of the
    transient block of a fitted signal, at one quantile level."""

    tau: float
    h: int
    fit: QuantileFit                 # unrestricted fit on all columns
    v_long_only: float               # objective with only long-term columns
    v_short_only: float              # objective with only short-term columns
    long_stat: float
    long_df: int
    long_p: float
    short_stat: float
    short_df: int
    short_p: float
    sparsity: float


def long_short_decomposition_tests(returns: np.ndarray,
                                   signals: FilteredSignals,
                                   tau: float,
                                   h: int = 1) -> LongShortTests:
    """Test the long-term and short-term signal blocks separately.

    Fits the tau-quantile of returns on all signal columns lagged by h,
    then on each block alone; the statistic for a block compares the fit
    without it against the full fit, with one degree of freedom per column
    in the block.
    """
    if not signals.long_idx or not signals.short_idx:
        raise ValueError("signals must carry both long- and short-term "
                         "columns (fit the long/short factor model)")
    y, x_all = _lagged_pairs(returns, signals.signal, h)
    long_cols = np.asarray(signals.long_idx, dtype=int)
    short_cols = np.asarray(signals.short_idx, dtype=int)

    def _fit(cols: np.ndarray) -> QuantileFit:
        sub = x_all[:, cols]
        keep = _nonconstant(sub)
        return quantile_fit(y, sub[:, keep], tau)

    full = _fit(np.concatenate([long_cols, short_cols]))
    fit_long = _fit(long_cols)
    fit_short = _fit(short_cols)
    spar = sparsity_hall_sheather(full.residuals, tau)
    denom = tau * (1.0 - tau) * spar
    long_stat = 2.0 * max(fit_short.v_hat - full.v_hat, 0.0) / denom
    short_stat = 2.0 * max(fit_long.v_hat - full.v_hat, 0.0) / denom
    long_df, short_df = long_cols.size, short_cols.size
    return LongShortTests(
        tau, h, full, fit_long.v_hat, fit_short.v_hat,
        long_stat, long_df, float(sps.chi2.sf(long_stat, long_df)),
        short_stat, short_df, float(sps.chi2.sf(short_stat, short_df)),
        spar)


@dataclass
class MultiLagResult:
    """Added explanatory power of signal lags 2..h over lag 1 alone."""

    h: int
    stat: float
    df: int
    p_value: float
    v_one_lag: float
    v_h_lags: float


def multi_lag_test(returns: np.ndarray, signals: FilteredSignals, tau: float,
                   h_max: int = 5) -> List[MultiLagResult]:
    """Compare h-lag quantile fits against the one-lag fit.

    For each h in 2..h_max, fits the tau-quantile of r_t on r_{t-1} and on
    signal lags 1..h, and on the restriction to lag 1 only, both on the
    common sample t = h+1..T; the statistic has one degree of freedom per
    extra lagged column.
    """
    if h_max < 2:
        raise ValueError("h_max must be at least 2")
    returns = np.asarray(returns, dtype=float).ravel()
    sig = signals.signal
    n, width = sig.shape
    if returns.size != n:
        raise ValueError("returns must align one-to-one with signal rows")
    results: List[MultiLagResult] = []
    for h in range(2, h_max + 1):
        y = returns[h:]
        if y.size <= (width * h + 2) + 1:
            raise ValueError(f"insufficient sample after lagging {h} times")
        r_lag = returns[h - 1:n - 1]
        blocks = [sig[h - k:n - k] for k in range(1, h + 1)]
        x_full = np.column_stack([r_lag[:, None], *blocks])
        x_one = np.column_stack([r_lag[:, None], blocks[0]])
        fit_full = quantile_fit(y, _reduced_design(x_full), tau)
        fit_one = quantile_fit(y, _reduced_design(x_one), tau)
        spar = sparsity_hall_sheather(fit_full.residuals, tau)
        stat = 2.0 * max(fit_one.v_hat - fit_full.v_hat, 0.0) / (
            tau * (1.0 - tau) * spar)
        df = width * (h - 1)
        results.append(MultiLagResult(h, stat, df,
                                      float(sps.chi2.sf(stat, df)),
                                      fit_one.v_hat, fit_full.v_hat))
    return results


def r1_table(returns: np.ndarray,
             signals_by_model: Dict[str, FilteredSignals],
             taus: Sequence[float] = QUANTILE_GRID,
             h: int = 1) -> pd.DataFrame:
    """Tabulate the local goodness-of-fit r1 and its joint significance for
    several fitted signal sets, one row per quantile level."""
    rows = []
    for tau in taus:
        row: Dict[str, object] = {"tau": tau}
        for name, signals in signals_by_model.items():
            y, x_all = _lagged_pairs(returns, signals.signal, h)
            keep = _nonconstant(x_all)
            fit = quantile_fit(y, x_all[:, keep], tau)
            row[f"r1_{name}"] = fit.r1
            row[f"p_{name}"] = fit.p_value
            row[f"stars_{name}"] = significance_stars(fit.p_value)
        rows.append(row)
    return pd.DataFrame(rows)
