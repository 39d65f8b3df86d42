"""Pure-NumPy filtering/smoothing kernels.

This module is the reference implementation of the two hot loops (forward
Kalman pass and backward smoothing pass).  A compiled twin with identical
semantics lives in ``mlss._filter_cy``; ``mlss._kernels`` picks one at import
time.  Both operate on raw arrays — model validation lives in
``mlss.statespace``.

Array conventions (shared with the compiled twin):

* state dimension ``n``, observation dimension ``K``, sample length ``T``;
* time index 0 is the initial state, observations occupy indices 1..T, so
  every per-time output array has length ``T + 1``;
* the observation noise covariance is diagonal and passed as a vector.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve, cholesky

from .exceptions import NumericalError

LOG_2PI = float(np.log(2.0 * np.pi))

# Relative jitter ladder used when an innovation covariance fails to factor.
JITTER_STEPS = (0.0, 1e-10, 1e-8, 1e-6)


def _sym(m):
    return 0.5 * (m + m.T)


def _chol_with_jitter(m):
    """Lower Cholesky factor of ``m``, retrying with escalating diagonal
    jitter (relative to the mean diagonal) before giving up."""
    base = float(np.mean(np.diag(m)))
    if not np.isfinite(base) or base <= 0.0:
        base = 1.0
    for jit in JITTER_STEPS:
        try:
            return cholesky(m + (jit * base) * np.eye(m.shape[0]), lower=True)
        except np.linalg.LinAlgError:
            continue
    raise NumericalError("covariance matrix is not positive definite "
                         "(jitter escalation exhausted)")


def filter_pass(lam, phi, q, r_diag, a, sigma0, y):
    """Forward Kalman recursion with prediction-error log-likelihood.

    Returns ``(pred_mean, pred_cov, filt_mean, filt_cov, gain, step_loglik,
    loglik)`` where index ``t`` of each array refers to time ``t`` (index 0
    holds the initial state / prior).
    """
    T, K = y.shape
    n = a.shape[0]
    pred_mean = np.zeros((T + 1, n))
    pred_cov = np.zeros((T + 1, n, n))
    filt_mean = np.zeros((T + 1, n))
    filt_cov = np.zeros((T + 1, n, n))
    gain = np.zeros((T + 1, n, K))
    step_ll = np.zeros(T + 1)

    pred_mean[0] = a
    pred_cov[0] = sigma0
    filt_mean[0] = a
    filt_cov[0] = sigma0

    loglik = 0.0
    for t in range(1, T + 1):
        fp = phi @ filt_mean[t - 1]
        pp = _sym(phi @ filt_cov[t - 1] @ phi.T + q)
        cp = lam @ pp                       # K x n, equals (Lam P)'
        s_inn = _sym(cp @ lam.T)
        s_inn[np.diag_indices(K)] += r_diag

        low = _chol_with_jitter(s_inn)
        v = y[t - 1] - lam @ fp
        solved_v = cho_solve((low, True), v)
        kt = cho_solve((low, True), cp).T   # n x K

        ll_t = -0.5 * (K * LOG_2PI
                       + 2.0 * float(np.sum(np.log(np.diag(low))))
                       + float(v @ solved_v))
        loglik += ll_t

        pred_mean[t] = fp
        pred_cov[t] = pp
        filt_mean[t] = fp + kt @ v
        filt_cov[t] = _sym(pp - kt @ cp)
        gain[t] = kt
        step_ll[t] = ll_t

    return pred_mean, pred_cov, filt_mean, filt_cov, gain, step_ll, loglik


def smoother_pass(lam, phi, gain_last, pred_cov, filt_mean, filt_cov):
    """Backward fixed-interval smoothing recursion.

    Returns ``(smooth_mean, smooth_cov, smoother_gain, lag_cov)``;
    ``lag_cov[t]`` is the smoothed covariance between the states at ``t`` and
    ``t - 1`` (valid for t >= 1), seeded at ``t = T`` from the final filter
    gain.  Prediction covariances must be invertible — a singular one signals
    a degenerate model and raises.
    """
    Tp1, n = filt_mean.shape
    T = Tp1 - 1
    smooth_mean = np.zeros((T + 1, n))
    smooth_cov = np.zeros((T + 1, n, n))
    sm_gain = np.zeros((T + 1, n, n))
    lag_cov = np.zeros((T + 1, n, n))

    smooth_mean[T] = filt_mean[T]
    smooth_cov[T] = filt_cov[T]

    for t in range(T, 0, -1):
        try:
            low = cholesky(pred_cov[t], lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                f"singular one-step prediction covariance at t={t}") from exc
        jt = cho_solve((low, True), phi @ filt_cov[t - 1]).T  # n x n
        sm_gain[t - 1] = jt
        smooth_mean[t - 1] = filt_mean[t - 1] + jt @ (
            smooth_mean[t] - phi @ filt_mean[t - 1])
        smooth_cov[t - 1] = _sym(filt_cov[t - 1] + jt @ (
            smooth_cov[t] - pred_cov[t]) @ jt.T)

    lag_cov[T] = (np.eye(n) - gain_last @ lam) @ phi @ filt_cov[T - 1]
    for t in range(T, 1, -1):
        lag_cov[t - 1] = (filt_cov[t - 1] @ sm_gain[t - 2].T
                          + sm_gain[t - 1] @ (lag_cov[t] - phi @ filt_cov[t - 1])
                          @ sm_gain[t - 2].T)

    return smooth_mean, smooth_cov, sm_gain, lag_cov
