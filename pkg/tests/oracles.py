"""Slow independent reference implementations used to pin down the fast code.

Everything in here is deliberately written from first principles (joint
Gaussian conditioning, exhaustive vertex enumeration, explicit double-entry
accounting) rather than reusing package internals, so that agreement between
the two routes is meaningful evidence of correctness.
"""
import itertools

import numpy as np
from scipy import stats


def psd_sqrt(m):
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    w = np.clip(w, 0.0, None)
    return v @ np.diag(np.sqrt(w)) @ v.T


class JointGaussianOracle:
    """Exact filtering/smoothing moments for tiny state-space instances.

    Represents every state and observation as a linear map of one long vector
    of independent standard-normal shocks, assembles the joint covariance,
    and conditions analytically.  O((T*K)^3) — fine for T <= 6.
    """

    def __init__(self, spec, T):
        n = spec.dim_state
        K = spec.n_series
        self.n, self.K, self.T = n, K, T
        nn = n + T * n + T * K
        s0 = psd_sqrt(spec.sigma0)
        sq = psd_sqrt(spec.q_tilde)
        sr = psd_sqrt(spec.r)

        # state coefficients on the shock vector [e0, v_1..v_T, eps_1..eps_T]
        self.C = np.zeros((T + 1, n, nn))
        self.mu = np.zeros((T + 1, n))
        self.C[0][:, :n] = s0
        self.mu[0] = spec.a
        for t in range(1, T + 1):
            self.mu[t] = spec.phi_tilde @ self.mu[t - 1]
            self.C[t] = spec.phi_tilde @ self.C[t - 1]
            self.C[t][:, n + (t - 1) * n: n + t * n] += sq

        self.D = np.zeros((T, K, nn))
        self.nu = np.zeros((T, K))
        for t in range(1, T + 1):
            self.nu[t - 1] = spec.lambda_tilde @ self.mu[t]
            self.D[t - 1] = spec.lambda_tilde @ self.C[t]
            self.D[t - 1][:, n + T * n + (t - 1) * K: n + T * n + t * K] += sr

    def state_given_obs(self, y, t, upto):
        """Mean and covariance of the state at time t given S_1..S_upto."""
        if upto == 0:
            return self.mu[t].copy(), self.C[t] @ self.C[t].T
        K = self.K
        dm = self.D[:upto].reshape(upto * K, -1)
        resid = y[:upto].ravel() - self.nu[:upto].ravel()
        s_dd = dm @ dm.T
        s_xd = self.C[t] @ dm.T
        sol = np.linalg.solve(s_dd, resid)
        mean = self.mu[t] + s_xd @ sol
        cov = self.C[t] @ self.C[t].T - s_xd @ np.linalg.solve(s_dd, s_xd.T)
        return mean, 0.5 * (cov + cov.T)

    def smoothed_pair_cov(self, y, t):
        """Cov(state_t, state_{t-1} | S_1..S_T)."""
        K, T = self.K, self.T
        dm = self.D.reshape(T * K, -1)
        s_dd = dm @ dm.T
        s_td = self.C[t] @ dm.T
        s_sd = self.C[t - 1] @ dm.T
        cov = self.C[t] @ self.C[t - 1].T - s_td @ np.linalg.solve(s_dd, s_sd.T)
        return cov

    def loglik(self, y):
        dm = self.D.reshape(self.T * self.K, -1)
        cov = dm @ dm.T
        return float(stats.multivariate_normal.logpdf(
            y.ravel(), mean=self.nu.ravel(), cov=cov, allow_singular=False))


def scalar_riccati_gain(sig_v2, sig_e2, p0, n_iter=2000):
    """Steady-state filter gain of the scalar local-level model, obtained by
    iterating the predicted-variance recursion to its fixed point."""
    p = p0 + sig_v2  # predicted variance at t=1
    for _ in range(n_iter):
        k = p / (p + sig_e2)
        p = p - k * p + sig_v2
    return p / (p + sig_e2)


def pinball(u, tau):
    u = np.asarray(u, dtype=float)
    return float(np.sum(u * (tau - (u < 0.0))))


def vertex_quantile_fit(y, x, tau):
    """Exhaustive-vertex quantile regression for tiny problems.

    ``x`` must already contain the intercept column.  Every basic solution
    (exact fit through p points) is enumerated; the pinball-optimal one is
    returned as (coefficients, objective).
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    n, p = x.shape
    best_v = np.inf
    best_b = None
    for idx in itertools.combinations(range(n), p):
        sub = x[list(idx)]
        if abs(np.linalg.det(sub)) < 1e-12:
            continue
        b = np.linalg.solve(sub, y[list(idx)])
        v = pinball(y - x @ b, tau)
        if v < best_v - 1e-12:
            best_v = v
            best_b = b
    return best_b, best_v


def ledger_by_hand(signal, market, cash0, cost_rate):
    """Explicit position/cash accounting for the trading ledger.

    Independent re-derivation: track share count and cash, charging
    proportional half-spread costs on every position change.
    """
    signal = np.asarray(signal, dtype=float)
    market = np.asarray(market, dtype=float)
    c0 = cash0 / market[0]
    cash = np.zeros_like(market)
    port = np.zeros_like(market)
    costs = np.zeros_like(market)
    cash[0] = cash0
    port[0] = signal[0] * c0 * market[0] + cash0
    trades = 0.0
    total_cost = 0.0
    for t in range(1, len(market)):
        ds = signal[t] - signal[t - 1]
        fee = abs(ds) * c0 * market[t] * cost_rate / 2.0
        cash[t] = cash[t - 1] - ds * c0 * market[t] - fee
        port[t] = signal[t] * c0 * market[t] + cash[t]
        costs[t] = fee
        trades += abs(ds)
        total_cost += fee
    return {"cash": cash, "portfolio": port, "costs": costs,
            "n_trades": trades, "total_costs": total_cost}


def random_structured_spec(rng, K, q, diffuse=False):
    """Random spec honouring the block structure (not identification)."""
    from mlss.statespace import StateSpaceSpec

    n = q + K
    lam_left = rng.normal(scale=1.0, size=(K, q))
    lam = np.hstack([lam_left, np.eye(K)])
    phi = np.zeros((n, n))
    phi[:q, :q] = np.eye(q)
    phi[q:, q:] = np.diag(rng.uniform(0.2, 0.9, size=K))
    m = rng.normal(size=(q, q + 1))
    q_long = m @ m.T / (q + 1) + 0.1 * np.eye(q) if q else np.zeros((0, 0))
    m = rng.normal(size=(K, K + 1))
    q_short = m @ m.T / (K + 1) + 0.1 * np.eye(K)
    qt = np.zeros((n, n))
    qt[:q, :q] = q_long
    qt[q:, q:] = q_short
    r = np.diag(rng.uniform(0.3, 1.2, size=K))
    a = rng.normal(scale=0.5, size=n)
    if diffuse:
        sigma0 = 1e7 * np.eye(n)
    else:
        m = rng.normal(size=(n, n + 1))
        sigma0 = m @ m.T / (n + 1) + 0.1 * np.eye(n)
    return StateSpaceSpec(lam, phi, qt, r, a, sigma0, q, K)

def simulate_spec(spec, n_obs, rng):
    """Plain-loop simulation of a state-space spec (test input generator)."""
    n = spec.dim_state
    k = spec.n_series
    f = spec.a + psd_sqrt(spec.sigma0) @ rng.normal(size=n)
    sq = psd_sqrt(spec.q_tilde)
    sr = np.sqrt(np.diag(spec.r))
    panel = np.empty((n_obs, k))
    states = np.empty((n_obs + 1, n))
    states[0] = f
    for t in range(1, n_obs + 1):
        f = spec.phi_tilde @ f + sq @ rng.normal(size=n)
        states[t] = f
        panel[t - 1] = spec.lambda_tilde @ f + sr * rng.normal(size=k)
    return panel, states


def identified_spec(rng, n_series, n_factors, load_scale=0.6):
    """Random spec satisfying the identification scheme (Q_long = I, zeros
    strictly above the diagonal of the free loading block)."""
    from mlss.statespace import StateSpaceSpec

    K, q = n_series, n_factors
    n = q + K
    lam_left = rng.normal(scale=load_scale, size=(K, q))
    for i in range(min(K, q)):
        lam_left[i, i + 1:] = 0.0
    lam = np.hstack([lam_left, np.eye(K)])
    phi = np.zeros((n, n))
    phi[:q, :q] = np.eye(q)
    phi[q:, q:] = np.diag(rng.uniform(0.3, 0.8, size=K))
    qt = np.eye(n)
    qt[q:, q:] = np.diag(rng.uniform(0.4, 1.0, size=K))
    r = np.diag(rng.uniform(0.3, 0.9, size=K))
    return StateSpaceSpec(lam, phi, qt, r, np.zeros(n), np.eye(n), q, K)
