"""Constrained EM estimation for the augmented state-space family.

The M-step of the Gaussian EM has closed-form updates; equality constraints
(identity blocks, diagonal transition, identification zeros) are imposed by
projecting the unconstrained update onto the constraint set under the metric
of the complete-data Hessian — a GLS projection that preserves the EM ascent
property.  Constraints are described by elementary selection matrices over
column-major vectorisations.

The same engine covers the whole model family: the full multivariate
long/short model (q persistent factors + K stationary components), its
univariate version, and the pure random-walk-plus-noise variants obtained by
q = 0 with the transition pinned to the identity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import chi2

from .exceptions import NumericalError
from .statespace import (StateSpaceSpec, kalman_filter, kalman_smoother,
                         loglikelihood)

__all__ = [
    "SufficientStats", "ConstraintSet", "EmTrace",
    "mlss_constraints", "mlnsl_constraints",
    "e_step", "m_step_unconstrained", "apply_constraints", "fit_em",
    "initial_spec", "count_free_parameters", "information_criteria",
    "select_q", "standard_errors", "lr_test", "constraint_violation",
    "free_parameter_layout",
]


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------

@dataclass
class SufficientStats:
    """Smoothed second moments entering the M-step.

    With smoothed means m_t, covariances P_t|T and lag-one covariances
    P_{t,t-1|T} (t = 0..T, index 0 = initial state):

        a_mat = sum_{t=1..T} m_{t-1} m_{t-1}' + P_{t-1|T}
        b_mat = sum_{t=1..T} m_t m_{t-1}'     + P_{t,t-1|T}
        c_mat = sum_{t=1..T} m_t m_t'         + P_{t|T}
        e1    = c_mat
        e2    = sum_{t=1..T} S_t m_t'
        e3    = sum_{t=1..T} S_t S_t'

    plus the smoothed initial state (f0_smooth, p0_smooth) used by the
    initial-condition updates.
    """

    a_mat: np.ndarray
    b_mat: np.ndarray
    c_mat: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    e3: np.ndarray
    f0_smooth: np.ndarray
    p0_smooth: np.ndarray
    n_obs: int
    n_factors: int
    n_series: int


@dataclass
class ConstraintSet:
    """Equality constraints for the constrained M-step.

    ``m_mat`` (f x (q+K)^2) selects pinned entries of vec(Phi~) and ``k_phi``
    holds their values; ``g_mat`` (s x K*q) does the same for the free loading
    block Lambda.  Vectorisation is column-major.  Every row must be
    elementary (exactly one unit entry).  ``q_fixed_mask``/``q_fixed_values``
    pin entries of Q~ elementwise, ``r_diag_mask`` marks entries of R pinned
    to zero (the off-diagonal for every model in the family).
    """

    m_mat: np.ndarray
    k_phi: np.ndarray
    g_mat: np.ndarray
    k_lambda: np.ndarray
    q_fixed_mask: np.ndarray
    q_fixed_values: np.ndarray
    r_diag_mask: np.ndarray
    n_factors: int
    n_series: int
    # Restrict the initial-state covariance update to its diagonal.  Set for
    # variants whose dynamics decouple across series (diagonal Q, identity
    # transition, diagonal R): the family is then a product of univariate
    # models and a dense initial covariance would be outside it.
    diagonal_sigma0: bool = False

    def __post_init__(self):
        for name in ("m_mat", "g_mat"):
            m = getattr(self, name)
            if m.size and not np.all(np.sum(m != 0.0, axis=1) == 1):
                raise ValueError(f"{name} rows must be elementary selectors")


@dataclass
class EmTrace:
    """Per-fit diagnostics: log-likelihood path (one entry per E-step),
    iteration count, convergence flag, and the final value of the relative
    stopping criterion |dl| / |l_j + l_{j-1}|."""

    loglik_path: np.ndarray
    n_iter: int
    converged: bool
    final_delta: float

    @property
    def loglik(self) -> float:
        return float(self.loglik_path[-1])


# ---------------------------------------------------------------------------
# constraint-set builders
# ---------------------------------------------------------------------------

def _selector(rows, cols, values, nrows, ncols):
    """Dense elementary selection matrix over a column-major vec."""
    m = np.zeros((len(rows), nrows * ncols))
    for a, (i, j) in enumerate(zip(rows, cols)):
        m[a, i + j * nrows] = 1.0
    return m, np.asarray(values, dtype=float)


def mlss_constraints(n_series: int, n_factors: int) -> ConstraintSet:
    """Constraints of the q-factor long/short model: Phi~ = blockdiag(I_q,
    diag(phi)) with only the K short-term autoregressive coefficients free,
    identification zeros strictly above the main diagonal of Lambda,
    Q_long = I_q with zero off-diagonal blocks, and diagonal R."""
    K, q = n_series, n_factors
    n = q + K
    rows, cols, vals = [], [], []
    for i in range(n):
        for j in range(n):
            if i == j and i >= q:
                continue  # free short-term AR coefficient
            rows.append(i)
            cols.append(j)
            vals.append(1.0 if i == j else 0.0)
    m_mat, k_phi = _selector(rows, cols, vals, n, n)

    rows, cols = [], []
    for i in range(K):
        for j in range(i + 1, q):
            rows.append(i)
            cols.append(j)
    g_mat, k_lambda = _selector(rows, cols, [0.0] * len(rows), K, q)

    q_mask = np.zeros((n, n), dtype=bool)
    q_vals = np.zeros((n, n))
    q_mask[:q, :] = True
    q_mask[:, :q] = True
    q_vals[:q, :q] = np.eye(q)

    r_mask = ~np.eye(K, dtype=bool)
    return ConstraintSet(m_mat, k_phi, g_mat, k_lambda, q_mask, q_vals,
                         r_mask, q, K)


def mlnsl_constraints(n_series: int, diagonal_q: bool = False) -> ConstraintSet:
    """Constraints of the random-walk-plus-noise variant: no persistent
    factors (q = 0), transition pinned to the identity, free symmetric state
    innovation covariance (optionally diagonal), diagonal R."""
    K = n_series
    rows, cols, vals = [], [], []
    for i in range(K):
        for j in range(K):
            rows.append(i)
            cols.append(j)
            vals.append(1.0 if i == j else 0.0)
    m_mat, k_phi = _selector(rows, cols, vals, K, K)
    g_mat = np.zeros((0, 0))
    k_lambda = np.zeros(0)
    q_mask = ~np.eye(K, dtype=bool) if diagonal_q else np.zeros((K, K), dtype=bool)
    q_vals = np.zeros((K, K))
    r_mask = ~np.eye(K, dtype=bool)
    return ConstraintSet(m_mat, k_phi, g_mat, k_lambda, q_mask, q_vals,
                         r_mask, 0, K, diagonal_sigma0=diagonal_q)


def _selector_pins(mat: np.ndarray, nrows: int):
    """Decode an elementary selection matrix into (row, col) index arrays."""
    if mat.size == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    flat = mat.argmax(axis=1)
    return flat % nrows, flat // nrows


# ---------------------------------------------------------------------------
# E-step / M-step
# ---------------------------------------------------------------------------

def e_step(spec: StateSpaceSpec, panel: np.ndarray):
    """One expectation step: filter + smoother + smoothed second moments.

    Returns ``(stats, smoother_output, loglik)`` where ``loglik`` is the exact
    observed-data log-likelihood at ``spec``.
    """
    panel = np.asarray(panel, dtype=float)
    filt = kalman_filter(spec, panel)
    smooth = kalman_smoother(spec, filt)
    sm = smooth.smooth_mean
    sc = smooth.smooth_cov
    lc = smooth.lag_cov
    a_mat = sm[:-1].T @ sm[:-1] + sc[:-1].sum(axis=0)
    b_mat = np.einsum("ti,tj->ij", sm[1:], sm[:-1]) + lc[1:].sum(axis=0)
    c_mat = sm[1:].T @ sm[1:] + sc[1:].sum(axis=0)
    e2 = panel.T @ sm[1:]
    e3 = panel.T @ panel
    stats = SufficientStats(a_mat, b_mat, c_mat, c_mat.copy(), e2, e3,
                            sm[0].copy(), sc[0].copy(), panel.shape[0],
                            spec.n_factors, spec.n_series)
    return stats, smooth, filt.loglik


def _solve_sym(m: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    try:
        return cho_solve(cho_factor(0.5 * (m + m.T)), rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular {what} (model underidentified "
                             "or degenerate data)") from exc


def _inv_sym(m: np.ndarray, what: str) -> np.ndarray:
    return _solve_sym(m, np.eye(m.shape[0]), what)


def m_step_unconstrained(stats: SufficientStats) -> StateSpaceSpec:
    """Unrestricted M-step.  The result is a raw candidate: it generally
    violates the block structure and is only meaningful as input to
    :func:`apply_constraints`."""
    T = stats.n_obs
    phi = _solve_sym(stats.a_mat, stats.b_mat.T, "state second-moment matrix").T
    lam = _solve_sym(stats.e1, stats.e2.T, "smoothed moment matrix e1").T
    w_q = (stats.c_mat - stats.b_mat @ phi.T - phi @ stats.b_mat.T
           + phi @ stats.a_mat @ phi.T) / T
    w_r = (stats.e3 - lam @ stats.e2.T - stats.e2 @ lam.T
           + lam @ stats.e1 @ lam.T) / T
    return StateSpaceSpec(lam, phi, 0.5 * (w_q + w_q.T), 0.5 * (w_r + w_r.T),
                          stats.f0_smooth.copy(), stats.p0_smooth.copy(),
                          stats.n_factors, stats.n_series)


def _project_pinned(mat_u, pins_r, pins_c, values, left_metric, right_inv,
                    what):
    """GLS projection of ``mat_u`` onto {M[pins] = values} under the metric
    (right_inv x left_metric) over the column-major vec.  Exploits the
    Kronecker structure: the correction is left_metric @ t @ right_inv with a
    sparse multiplier matrix t supported on the pinned entries."""
    if len(pins_r) == 0:
        return mat_u.copy()
    nr, nc = mat_u.shape
    if len(pins_r) == nr * nc:  # everything pinned: projection is direct
        out = np.zeros_like(mat_u)
        out[pins_r, pins_c] = values
        return out
    s_sub = (right_inv[np.ix_(pins_c, pins_c)]
             * left_metric[np.ix_(pins_r, pins_r)])
    viol = values - mat_u[pins_r, pins_c]
    x = _solve_sym(s_sub, viol, f"{what} constraint system")
    t = np.zeros_like(mat_u)
    t[pins_r, pins_c] = x
    out = mat_u + left_metric @ t @ right_inv
    out[pins_r, pins_c] = values  # remove rounding residue: exact pins
    return out


def _psd_floor(m: np.ndarray, floor: float) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w.min(initial=np.inf) >= floor:
        return 0.5 * (m + m.T)
    w = np.clip(w, floor, None)
    out = (v * w) @ v.T
    return 0.5 * (out + out.T)


def apply_constraints(candidate: StateSpaceSpec, stats: SufficientStats,
                      cons: ConstraintSet,
                      metric_spec: StateSpaceSpec | None = None) -> StateSpaceSpec:
    """Project an unconstrained M-step candidate onto the constraint set.

    Phi~ and Lambda~ are projected under the complete-data Hessian metric
    ((A^-1 x Q~) resp. (E1^-1 x R), column-major vec); the projection metric
    covariances come from ``metric_spec`` (the previous EM iterate when called
    from :func:`fit_em`; defaults to the candidate).  Q~ and R are then
    recomputed at the projected Phi~/Lambda~ and pinned elementwise — exact
    for the block structure because the objective separates across blocks.
    Pinned entries of the result are exact, free entries adjust.
    """
    ms = metric_spec if metric_spec is not None else candidate
    q, K = cons.n_factors, cons.n_series
    n = q + K
    T = stats.n_obs

    # --- transition matrix ---
    phi_r, phi_c = _selector_pins(cons.m_mat, n)
    if len(phi_r) == n * n:
        phi_proj = np.zeros((n, n))
        phi_proj[phi_r, phi_c] = cons.k_phi
    else:
        a_inv = _inv_sym(stats.a_mat, "state second-moment matrix")
        phi_proj = _project_pinned(candidate.phi_tilde, phi_r, phi_c,
                                   cons.k_phi, ms.q_tilde, a_inv,
                                   "transition")

    # --- state innovation covariance at the projected transition ---
    w_q = (stats.c_mat - stats.b_mat @ phi_proj.T - phi_proj @ stats.b_mat.T
           + phi_proj @ stats.a_mat @ phi_proj.T) / T
    q_proj = 0.5 * (w_q + w_q.T)
    q_proj[cons.q_fixed_mask] = cons.q_fixed_values[cons.q_fixed_mask]
    free = ~np.diag(cons.q_fixed_mask)
    if free.any():
        idx = np.flatnonzero(free)
        block = _psd_floor(q_proj[np.ix_(idx, idx)], 1e-10)
        q_proj[np.ix_(idx, idx)] = block
        q_proj[cons.q_fixed_mask] = cons.q_fixed_values[cons.q_fixed_mask]

    # --- loadings: structural identity block plus identification pins ---
    lam_r, lam_c = _selector_pins(cons.g_mat, K)
    pins_r = np.concatenate([lam_r, np.tile(np.arange(K), K)])
    pins_c = np.concatenate([lam_c, q + np.repeat(np.arange(K), K)])
    # identity block values: 1 on the diagonal of the right block
    ident_vals = np.eye(K).ravel(order="F")
    vals = np.concatenate([cons.k_lambda, ident_vals])
    e1_inv = _inv_sym(stats.e1, "smoothed moment matrix e1")
    lam_proj = _project_pinned(candidate.lambda_tilde, pins_r, pins_c, vals,
                               ms.r, e1_inv, "loading")

    # --- observation noise at the projected loadings ---
    w_r = (stats.e3 - lam_proj @ stats.e2.T - stats.e2 @ lam_proj.T
           + lam_proj @ stats.e1 @ lam_proj.T) / T
    r_proj = 0.5 * (w_r + w_r.T)
    r_proj[cons.r_diag_mask] = 0.0
    d = np.diag_indices(K)
    r_proj[d] = np.clip(r_proj[d], 1e-10, None)

    return StateSpaceSpec(lam_proj, phi_proj, q_proj, r_proj,
                          candidate.a.copy(), candidate.sigma0.copy(), q, K)


def constraint_violation(spec: StateSpaceSpec, cons: ConstraintSet) -> float:
    """Largest absolute violation of any pinned entry (0 for a feasible spec)."""
    q, K = cons.n_factors, cons.n_series
    n = q + K
    worst = 0.0
    pr, pc = _selector_pins(cons.m_mat, n)
    if len(pr):
        worst = max(worst, float(np.abs(spec.phi_tilde[pr, pc] - cons.k_phi).max()))
    pr, pc = _selector_pins(cons.g_mat, K)
    if len(pr):
        worst = max(worst, float(np.abs(spec.lam[pr, pc] - cons.k_lambda).max()))
    if cons.q_fixed_mask.any():
        worst = max(worst, float(np.abs(
            spec.q_tilde[cons.q_fixed_mask]
            - cons.q_fixed_values[cons.q_fixed_mask]).max()))
    if cons.r_diag_mask.any():
        worst = max(worst, float(np.abs(spec.r[cons.r_diag_mask]).max()))
    worst = max(worst, float(np.abs(spec.lambda_tilde[:, q:] - np.eye(K)).max()))
    return worst


def _pin_spec(spec: StateSpaceSpec, cons: ConstraintSet) -> None:
    """Overwrite every pinned entry with its constraint value (in place)."""
    q, K = cons.n_factors, cons.n_series
    pr, pc = _selector_pins(cons.m_mat, q + K)
    spec.phi_tilde[pr, pc] = cons.k_phi
    pr, pc = _selector_pins(cons.g_mat, K)
    spec.lambda_tilde[pr, pc] = cons.k_lambda
    spec.lambda_tilde[:, q:] = np.eye(K)
    spec.q_tilde[cons.q_fixed_mask] = cons.q_fixed_values[cons.q_fixed_mask]
    spec.r[cons.r_diag_mask] = 0.0


# ---------------------------------------------------------------------------
# initial values and the fit loop
# ---------------------------------------------------------------------------

def _ar_noise_mle(u: np.ndarray, phi_start: float, qs_start: float,
                  r_start: float, phi_fixed: float | None = None,
                  polish: bool = False):
    """Exact MLE of a univariate AR(1)-plus-noise (or, with ``phi_fixed=1``,
    random-walk-plus-noise) model, used to refine per-series starting values.
    Optimises the Kalman log-likelihood over (tanh^-1 phi, log Q, log R) with
    L-BFGS; falls back to the supplied moment-matched values on failure.
    ``polish`` adds a deterministic simplex refinement, used when the series
    is modeled in isolation and downstream consumers compare against an
    equivalent univariate fit."""
    from scipy.optimize import minimize

    u = u - u.mean()
    v0 = max(u.var(), 1e-12)
    lo, hi = math.log(1e-6 * v0), math.log(1e3 * v0)
    y = u[:, None]
    lam1 = np.array([[1.0]])
    free_phi = phi_fixed is None

    def build(ph, lq, lr):
        return StateSpaceSpec(lam1, np.array([[ph]]),
                              np.array([[math.exp(lq)]]),
                              np.array([[math.exp(lr)]]), np.zeros(1),
                              np.array([[1e7]]), 0, 1)

    def nll(x):
        ph = math.tanh(x[0]) if free_phi else phi_fixed
        try:
            return -loglikelihood(build(ph, x[-2], x[-1]), y)
        except (NumericalError, ValueError, OverflowError):
            return 1e12

    x0_tail = [math.log(np.clip(qs_start, 1e-6 * v0, 1e3 * v0)),
               math.log(np.clip(r_start, 1e-6 * v0, 1e3 * v0))]
    if free_phi:
        x0 = np.array([math.atanh(np.clip(phi_start, -0.95, 0.95))] + x0_tail)
        bounds = [(-3.8, 3.8), (lo, hi), (lo, hi)]  # |phi| <= tanh(3.8)
    else:
        x0 = np.array(x0_tail)
        bounds = [(lo, hi), (lo, hi)]
    try:
        res = minimize(nll, x0, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": 60})
        x = res.x if np.isfinite(res.fun) and res.fun < nll(x0) + 1e-9 else x0
        if polish:
            # The quasi-Newton step runs on finite-difference gradients and
            # can stall on the flat Q/R ridge at a point sensitive to
            # last-bit input noise; a simplex refinement pins down the
            # optimum deterministically.
            res2 = minimize(nll, x, method="Nelder-Mead",
                            options={"xatol": 1e-12, "fatol": 1e-14,
                                     "maxiter": 2000})
            if np.isfinite(res2.fun) and res2.fun <= nll(x) and \
                    np.all([lo_b <= xi <= hi_b
                            for xi, (lo_b, hi_b) in zip(res2.x, bounds)]):
                x = res2.x
    except Exception:
        x = x0
    ph = math.tanh(x[0]) if free_phi else phi_fixed
    return ph, math.exp(x[-2]), math.exp(x[-1])


def initial_spec(panel: np.ndarray, n_factors: int, cons: ConstraintSet,
                 seed: int | None = None, jitter: float = 0.0) -> StateSpaceSpec:
    """Moment-matching starting values.

    Loadings come from principal components of the panel in levels, rotated
    so the top q x q block is lower triangular (the identified representation
    — valid because the persistent-factor innovation covariance is pinned to
    the identity, which any orthogonal rotation preserves) and rescaled so
    each fitted factor has unit step variance.  Per-series transient
    parameters are matched to autocovariances of the differenced residual:
    for an AR(1)-plus-noise residual, gamma_d(3)/gamma_d(2) identifies the AR
    coefficient regardless of leftover persistent content.  Series whose AR
    coefficient the constraint set pins at 1 use the random-walk-plus-noise
    moment split instead.  Each per-series triple is then refined by the
    exact univariate MLE (:func:`_ar_noise_mle`), which is cheap and makes
    the multivariate EM start close to the optimum.  The initial state is
    diffuse.  ``seed``/``jitter`` optionally perturb the free entries (used
    to probe sensitivity to starting values).
    """
    panel = np.asarray(panel, dtype=float)
    if not np.isfinite(panel).all():
        raise ValueError("panel contains non-finite values")
    T, K = panel.shape
    q = n_factors
    n = q + K
    if T < 3:
        raise ValueError("panel too short to initialise")
    xc = panel - panel.mean(axis=0)

    lam_left = np.zeros((K, q))
    resid = xc
    if q > 0:
        w, v = np.linalg.eigh(np.atleast_2d(np.cov(xc.T)))
        order = np.argsort(w)[::-1][:q]
        fhat = xc @ v[:, order]
        lam_left, *_ = np.linalg.lstsq(fhat, xc, rcond=None)
        lam_left = lam_left.T
        top = lam_left[:min(K, q), :]
        if top.shape[0] == q:
            qmat, _ = np.linalg.qr(top.T)
            lam_left = lam_left @ qmat
            fhat = fhat @ qmat
        signs = np.sign(np.diag(lam_left[:min(K, q), :q]))
        signs = np.where(signs == 0, 1.0, signs)
        full_signs = np.ones(q)
        full_signs[:len(signs)] = signs
        lam_left = lam_left * full_signs
        fhat = fhat * full_signs
        step_sd = np.std(np.diff(fhat, axis=0), axis=0) if T > 1 else np.ones(q)
        step_sd = np.where(step_sd < 1e-12, 1.0, step_sd)
        lam_left = lam_left * step_sd
        fhat = fhat / step_sd
        resid = xc - fhat @ lam_left.T

    # which short-term AR coefficients does the constraint set pin, and to what?
    pr, pc = _selector_pins(cons.m_mat, n)
    pinned_phi = {(i, j): v for i, j, v in zip(pr, pc, cons.k_phi)}

    phi0 = np.empty(K)
    qs0 = np.empty(K)
    r0 = np.empty(K)
    for i in range(K):
        # With no persistent factors the residual is the series itself; use
        # the raw contiguous column (differencing removes the mean anyway) so
        # a joint fit of decoupled series and per-column univariate fits see
        # bitwise-identical inputs.
        ui = (np.ascontiguousarray(panel[:, i]) if q == 0
              else np.ascontiguousarray(resid[:, i]))
        d = np.diff(ui)
        vd = max(d.var(), 1e-12)
        g1 = np.mean(d[1:] * d[:-1]) if len(d) > 1 else 0.0
        g2 = np.mean(d[2:] * d[:-2]) if len(d) > 2 else 0.0
        g3 = np.mean(d[3:] * d[:-3]) if len(d) > 3 else 0.0
        pinned = pinned_phi.get((q + i, q + i))
        if pinned is not None and pinned >= 0.999:
            # random-walk residual: Var(du) = Q + 2R, gamma_d(1) = -R
            phi0[i] = pinned
            r0[i] = float(np.clip(-g1, 0.01 * vd, 0.49 * vd))
            qs0[i] = max(vd - 2.0 * r0[i], 0.01 * vd)
            ph, qs, rr = _ar_noise_mle(ui, 1.0, qs0[i], r0[i],
                                       phi_fixed=1.0, polish=(q == 0))
            qs0[i], r0[i] = qs, rr
            continue
        if pinned is not None:
            ph = float(np.clip(pinned, 0.05, 0.95))
        elif abs(g2) > 1e-14:
            ph = float(np.clip(g3 / g2, 0.05, 0.95))
        else:
            ph = 0.5
        vpsi = -g2 / (ph * (1.0 - ph) ** 2)
        vpsi = float(np.clip(vpsi, 0.01 * vd, 25.0 * vd))
        rr = -g1 - vpsi * (1.0 - ph) ** 2
        rr = float(np.clip(rr, 0.01 * vd, None))
        qs = max(vpsi * (1.0 - ph * ph), 1e-8)
        if pinned is None and T >= 30:
            ph, qs, rr = _ar_noise_mle(ui, ph, qs, rr, polish=(q == 0))
        phi0[i] = pinned if pinned is not None else ph
        r0[i] = rr
        qs0[i] = qs

    phi = np.zeros((n, n))
    phi[:q, :q] = np.eye(q)
    phi[q:, q:] = np.diag(phi0)
    qt = np.zeros((n, n))
    qt[:q, :q] = np.eye(q)
    qt[q:, q:] = np.diag(qs0)
    r = np.diag(r0)

    if jitter and seed is not None:
        rng = np.random.default_rng(seed)
        lam_left = lam_left * (1.0 + jitter * rng.normal(size=lam_left.shape))
        dphi = np.clip(phi0 + jitter * rng.normal(size=K), 0.05, 0.95)
        phi[q:, q:] = np.diag(dphi)
        qt[q:, q:] = np.diag(qs0 * np.exp(jitter * rng.normal(size=K)))
        r = np.diag(r0 * np.exp(jitter * rng.normal(size=K)))

    lam = np.hstack([lam_left, np.eye(K)])
    spec = StateSpaceSpec(lam, phi, qt, r, np.zeros(n), 1e7 * np.eye(n), q, K)
    _pin_spec(spec, cons)
    return spec


def fit_em(panel: np.ndarray, n_factors: int,
           cons: ConstraintSet | None = None,
           init: StateSpaceSpec | None = None,
           tol: float = 1e-3, max_iter: int = 500):
    """Constrained EM fit.

    Stops when the relative change |l_j - l_{j-1}| / |l_j + l_{j-1}| drops
    below ``tol / 2`` or after ``max_iter`` iterations.  The initial state
    mean is pinned at zero throughout; its covariance is re-estimated each
    iteration (floored at 1e-8 I).  Returns ``(spec, trace)``.
    """
    panel = np.asarray(panel, dtype=float)
    if panel.ndim != 2 or panel.shape[0] < 3:
        raise ValueError("panel must be T x K with T >= 3")
    if not np.isfinite(panel).all():
        raise ValueError("panel contains non-finite values")
    K = panel.shape[1]
    if cons is None:
        cons = mlss_constraints(K, n_factors)
    if cons.n_factors != n_factors or cons.n_series != K:
        raise ValueError("constraint set does not match panel/n_factors")
    if init is None:
        init = initial_spec(panel, n_factors, cons)
    if constraint_violation(init, cons) > 1e-8:
        raise ValueError("initial spec violates the constraint set")
    init.validate()

    n = n_factors + K
    spec = init.copy()
    path: list[float] = []
    converged = False
    final_delta = float("nan")
    try:
        for it in range(max_iter):
            stats, _, ll = e_step(spec, panel)
            path.append(ll)
            if len(path) > 1:
                denom = max(abs(path[-1] + path[-2]), 1e-12)
                final_delta = abs(path[-1] - path[-2]) / denom
                if final_delta < tol / 2.0:
                    converged = True
                    break
            if it == max_iter - 1:
                break  # keep the returned spec aligned with loglik_path[-1]
            cand = m_step_unconstrained(stats)
            new = apply_constraints(cand, stats, cons, metric_spec=spec)
            new.a = np.zeros(n)
            s0 = stats.p0_smooth + np.outer(stats.f0_smooth, stats.f0_smooth)
            if cons.diagonal_sigma0:
                s0 = np.diag(np.diag(s0))
            new.sigma0 = _psd_floor(s0, 1e-8)
            spec = new
    except NumericalError as exc:
        # callers that report progress can still show the partial path
        exc.loglik_path = np.asarray(path)  # type: ignore[attr-defined]
        raise
    return spec, EmTrace(np.asarray(path), len(path), converged, final_delta)


# ---------------------------------------------------------------------------
# model selection and inference
# ---------------------------------------------------------------------------

def count_free_parameters(cons: ConstraintSet) -> int:
    """Free entries of (Lambda, phi, Q~, R) under the constraint set; the
    symmetric Q~ is counted on its lower triangle."""
    q, K = cons.n_factors, cons.n_series
    n = q + K
    phi_free = n * n - cons.m_mat.shape[0]
    lam_free = K * q - cons.g_mat.shape[0]
    tri = np.tril_indices(n)
    q_free = int(np.sum(~cons.q_fixed_mask[tri]))
    r_free = K - int(np.sum(cons.r_diag_mask[np.diag_indices(K)]))
    return phi_free + lam_free + q_free + r_free


def information_criteria(loglik: float, n_params: int, n_obs: int,
                         n_series: int):
    """(AIC, BIC) with the BIC sample size equal to the number of scalar
    observations T*K."""
    aic = -2.0 * loglik + 2.0 * n_params
    bic = -2.0 * loglik + n_params * math.log(n_obs * n_series)
    return aic, bic


def select_q(panel: np.ndarray, q_candidates, cons_factory=None,
             tol: float = 1e-3, max_iter: int = 500):
    """Fit every candidate factor count and rank by BIC.

    Returns ``(q_best, rows)`` where ``rows`` is one dict per candidate with
    loglik / n_params / aic / bic / converged, or an ``error`` string when
    that fit failed (a failed candidate is skipped, not fatal).
    """
    panel = np.asarray(panel, dtype=float)
    K = panel.shape[1]
    if cons_factory is None:
        cons_factory = lambda qq: mlss_constraints(K, qq)  # noqa: E731
    rows = []
    for qq in q_candidates:
        row = {"q": int(qq), "loglik": math.nan, "n_params": 0,
               "aic": math.nan, "bic": math.nan, "converged": False,
               "error": None}
        try:
            cons = cons_factory(int(qq))
            spec, trace = fit_em(panel, int(qq), cons, tol=tol,
                                 max_iter=max_iter)
            p = count_free_parameters(cons)
            aic, bic = information_criteria(trace.loglik, p,
                                            panel.shape[0], K)
            row.update(loglik=trace.loglik, n_params=p, aic=aic, bic=bic,
                       converged=trace.converged)
        except (NumericalError, ValueError) as exc:
            row["error"] = str(exc)
        rows.append(row)
    valid = [r for r in rows if r["error"] is None and np.isfinite(r["bic"])]
    if not valid:
        raise NumericalError("no candidate factor count could be fitted")
    q_best = min(valid, key=lambda r: (r["bic"], r["q"]))["q"]
    return q_best, rows


def free_parameter_layout(cons: ConstraintSet):
    """Names and positions of the free parameters, in packing order:
    Lambda entries (column-major), short-term AR coefficients, lower-triangle
    Q~ entries, R diagonal."""
    q, K = cons.n_factors, cons.n_series
    n = q + K
    pinned_lam = set(zip(*_selector_pins(cons.g_mat, K)))
    pinned_phi = set(zip(*_selector_pins(cons.m_mat, n)))
    layout = []
    for j in range(q):
        for i in range(K):
            if (i, j) not in pinned_lam:
                layout.append((f"lambda[{i},{j}]", "lam", i, j))
    for j in range(n):
        for i in range(n):
            if (i, j) not in pinned_phi:
                layout.append((f"phi[{i - q},{j - q}]", "phi", i, j))
    for j in range(n):
        for i in range(j, n):
            if not cons.q_fixed_mask[i, j]:
                layout.append((f"q[{i - q},{j - q}]" if q and i >= q
                               else f"q[{i},{j}]", "q", i, j))
    for i in range(K):
        if not cons.r_diag_mask[i, i]:
            layout.append((f"r[{i},{i}]", "r", i, i))
    return layout


def _pack(spec: StateSpaceSpec, layout) -> np.ndarray:
    src = {"lam": spec.lam, "phi": spec.phi_tilde, "q": spec.q_tilde,
           "r": spec.r}
    return np.array([src[tag][i, j] for _, tag, i, j in layout])


def _unpack(spec: StateSpaceSpec, layout, theta: np.ndarray) -> StateSpaceSpec:
    out = spec.copy()
    for (name, tag, i, j), val in zip(layout, theta):
        if tag == "lam":
            out.lambda_tilde[i, j] = val
        elif tag == "phi":
            out.phi_tilde[i, j] = val
        elif tag == "q":
            out.q_tilde[i, j] = val
            out.q_tilde[j, i] = val
        else:
            out.r[i, j] = val
    return out


def standard_errors(spec: StateSpaceSpec, panel: np.ndarray,
                    cons: ConstraintSet, step: float = 1e-4):
    """Finite-difference observed-information standard errors for the free
    parameters (loadings, AR coefficients, Q~ and R entries).

    The Hessian of the log-likelihood is built from central differences; the
    SE vector is sqrt(diag((-H)^-1)).  Parameters whose rows fail (numerical
    problems, non-positive curvature) get NaN rather than raising.  Returns a
    dict with ``names``, ``estimate``, ``se`` and the raw ``hessian``.
    """
    panel = np.asarray(panel, dtype=float)
    layout = free_parameter_layout(cons)
    theta0 = _pack(spec, layout)
    p = len(theta0)

    def ll(theta):
        try:
            return loglikelihood(_unpack(spec, layout, theta), panel)
        except (NumericalError, ValueError):
            return math.nan

    h = step * (1.0 + np.abs(theta0))
    for idx, (name, tag, i, j) in enumerate(layout):
        if tag in ("q", "r") and i == j:  # variances must stay positive
            h[idx] = min(h[idx], max(theta0[idx] / 2.0, 1e-12))

    f0 = ll(theta0)
    hess = np.full((p, p), np.nan)
    for i in range(p):
        ei = np.zeros(p)
        ei[i] = h[i]
        fp = ll(theta0 + ei)
        fm = ll(theta0 - ei)
        hess[i, i] = (fp - 2.0 * f0 + fm) / (h[i] * h[i])
        for j in range(i + 1, p):
            ej = np.zeros(p)
            ej[j] = h[j]
            fpp = ll(theta0 + ei + ej)
            fpm = ll(theta0 + ei - ej)
            fmp = ll(theta0 - ei + ej)
            fmm = ll(theta0 - ei - ej)
            hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4 * h[i] * h[j])

    se = np.full(p, np.nan)
    if np.isfinite(hess).all():
        try:
            cov = cho_solve(cho_factor(-hess), np.eye(p))
            se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        except np.linalg.LinAlgError:
            cov = np.linalg.pinv(-hess)
            d = np.diag(cov)
            se = np.where(d > 0, np.sqrt(np.abs(d)), np.nan)
    else:
        good = np.flatnonzero(np.isfinite(hess).all(axis=1))
        if good.size:
            sub = hess[np.ix_(good, good)]
            try:
                cov = np.linalg.inv(-sub)
                d = np.diag(cov)
                se[good] = np.where(d > 0, np.sqrt(np.abs(d)), np.nan)
            except np.linalg.LinAlgError:
                pass
    return {"names": [name for name, *_ in layout], "estimate": theta0,
            "se": se, "hessian": hess}


def lr_test(loglik_full: float, loglik_nested: float, df: int):
    """Generic nested-model likelihood-ratio test: statistic
    2 (l_full - l_nested) against a chi-square with ``df`` degrees of
    freedom.  Returns (statistic, p_value)."""
    if df <= 0:
        raise ValueError("df must be positive")
    stat = 2.0 * (loglik_full - loglik_nested)
    return stat, float(chi2.sf(stat, df))
