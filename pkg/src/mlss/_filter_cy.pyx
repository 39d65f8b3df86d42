# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled filtering/smoothing kernels.

Semantics match ``mlss._filter_py`` exactly (same jitter ladder, same
symmetrisation points); see that module for the array conventions.  The
matrix helpers are hand-rolled: state dimensions here are small (a few tens),
where plain C loops are competitive with BLAS and keep the build free of
external bindings.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport log, sqrt

from .exceptions import NumericalError

cnp.import_array()

cdef double LOG_2PI = 1.8378770664093453


cdef inline void mat_mul(const double[:, :] a, const double[:, :] b,
                         double[:, :] out,
                         Py_ssize_t m, Py_ssize_t kk, Py_ssize_t n) noexcept nogil:
    # out (m x n) = a (m x kk) @ b (kk x n)
    cdef Py_ssize_t i, j, k
    cdef double aik
    for i in range(m):
        for j in range(n):
            out[i, j] = 0.0
        for k in range(kk):
            aik = a[i, k]
            if aik != 0.0:
                for j in range(n):
                    out[i, j] += aik * b[k, j]


cdef inline void mat_mul_bt(const double[:, :] a, const double[:, :] b,
                            double[:, :] out,
                            Py_ssize_t m, Py_ssize_t kk, Py_ssize_t n) noexcept nogil:
    # out (m x n) = a (m x kk) @ b.T   with b (n x kk)
    cdef Py_ssize_t i, j, k
    cdef double s
    for i in range(m):
        for j in range(n):
            s = 0.0
            for k in range(kk):
                s += a[i, k] * b[j, k]
            out[i, j] = s


cdef inline void mat_vec(const double[:, :] a, const double[:] x, double[:] out,
                         Py_ssize_t m, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double s
    for i in range(m):
        s = 0.0
        for j in range(n):
            s += a[i, j] * x[j]
        out[i] = s


cdef inline void symmetrise(double[:, :] a, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double v
    for i in range(n):
        for j in range(i + 1, n):
            v = 0.5 * (a[i, j] + a[j, i])
            a[i, j] = v
            a[j, i] = v


cdef inline int chol_lower(double[:, :] a, Py_ssize_t n) noexcept nogil:
    # In-place lower Cholesky; returns nonzero if a pivot is not positive.
    cdef Py_ssize_t i, j, p
    cdef double s
    for j in range(n):
        s = a[j, j]
        for p in range(j):
            s -= a[j, p] * a[j, p]
        if not (s > 0.0):  # catches non-positive and NaN
            return 1
        a[j, j] = sqrt(s)
        for i in range(j + 1, n):
            s = a[i, j]
            for p in range(j):
                s -= a[i, p] * a[j, p]
            a[i, j] = s / a[j, j]
    return 0


cdef inline void cho_solve_vec(const double[:, :] low, double[:] b,
                               Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, p
    cdef double s
    for i in range(n):
        s = b[i]
        for p in range(i):
            s -= low[i, p] * b[p]
        b[i] = s / low[i, i]
    for i in range(n - 1, -1, -1):
        s = b[i]
        for p in range(i + 1, n):
            s -= low[p, i] * b[p]
        b[i] = s / low[i, i]


cdef inline void cho_solve_mat(const double[:, :] low, double[:, :] b,
                               Py_ssize_t n, Py_ssize_t m) noexcept nogil:
    # Solve (L L') X = B in place; B is n x m.
    cdef Py_ssize_t i, j, p
    cdef double s
    for j in range(m):
        for i in range(n):
            s = b[i, j]
            for p in range(i):
                s -= low[i, p] * b[p, j]
            b[i, j] = s / low[i, i]
        for i in range(n - 1, -1, -1):
            s = b[i, j]
            for p in range(i + 1, n):
                s -= low[p, i] * b[p, j]
            b[i, j] = s / low[i, i]


cdef int chol_with_jitter(const double[:, :] src, double[:, :] work,
                          Py_ssize_t n) noexcept nogil:
    # Copy src into work and factor, escalating relative diagonal jitter.
    # Mirrors the ladder in mlss._filter_py.  Returns nonzero on failure.
    cdef double[4] steps
    cdef double base = 0.0
    cdef Py_ssize_t i, j, k
    steps[0] = 0.0
    steps[1] = 1e-10
    steps[2] = 1e-8
    steps[3] = 1e-6
    for i in range(n):
        base += src[i, i]
    base /= n
    if not (base > 0.0):
        base = 1.0
    for k in range(4):
        for i in range(n):
            for j in range(n):
                work[i, j] = src[i, j]
            work[i, i] += steps[k] * base
        if chol_lower(work, n) == 0:
            return 0
    return 1


def filter_pass(double[:, ::1] lam, double[:, ::1] phi, double[:, ::1] q,
                double[::1] r_diag, double[::1] a, double[:, ::1] sigma0,
                double[:, ::1] y):
    """Forward Kalman recursion; same contract as the NumPy twin."""
    cdef Py_ssize_t T = y.shape[0]
    cdef Py_ssize_t K = y.shape[1]
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t t, i, j, p

    pred_mean_np = np.zeros((T + 1, n))
    pred_cov_np = np.zeros((T + 1, n, n))
    filt_mean_np = np.zeros((T + 1, n))
    filt_cov_np = np.zeros((T + 1, n, n))
    gain_np = np.zeros((T + 1, n, K))
    step_ll_np = np.zeros(T + 1)

    cdef double[:, ::1] pred_mean = pred_mean_np
    cdef double[:, :, ::1] pred_cov = pred_cov_np
    cdef double[:, ::1] filt_mean = filt_mean_np
    cdef double[:, :, ::1] filt_cov = filt_cov_np
    cdef double[:, :, ::1] gain = gain_np
    cdef double[::1] step_ll = step_ll_np

    tmp_nn_np = np.zeros((n, n))
    cp_np = np.zeros((K, n))
    s_inn_np = np.zeros((K, K))
    low_np = np.zeros((K, K))
    sol_np = np.zeros((K, n))
    v_np = np.zeros(K)
    sv_np = np.zeros(K)
    fp_np = np.zeros(n)
    cdef double[:, ::1] tmp_nn = tmp_nn_np
    cdef double[:, ::1] cp = cp_np
    cdef double[:, ::1] s_inn = s_inn_np
    cdef double[:, ::1] low = low_np
    cdef double[:, ::1] sol = sol_np
    cdef double[::1] v = v_np
    cdef double[::1] sv = sv_np
    cdef double[::1] fp = fp_np

    cdef double loglik = 0.0
    cdef double ll_t, logdet, quad
    cdef int fail = 0

    for i in range(n):
        pred_mean[0, i] = a[i]
        filt_mean[0, i] = a[i]
        for j in range(n):
            pred_cov[0, i, j] = sigma0[i, j]
            filt_cov[0, i, j] = sigma0[i, j]

    with nogil:
        for t in range(1, T + 1):
            # prediction
            mat_vec(phi, filt_mean[t - 1], fp, n, n)
            mat_mul(phi, filt_cov[t - 1], tmp_nn, n, n, n)
            mat_mul_bt(tmp_nn, phi, pred_cov[t], n, n, n)
            for i in range(n):
                for j in range(n):
                    pred_cov[t, i, j] += q[i, j]
            symmetrise(pred_cov[t], n)
            for i in range(n):
                pred_mean[t, i] = fp[i]

            # innovation
            mat_mul(lam, pred_cov[t], cp, K, n, n)
            mat_mul_bt(cp, lam, s_inn, K, n, K)
            symmetrise(s_inn, K)
            for i in range(K):
                s_inn[i, i] += r_diag[i]
            if chol_with_jitter(s_inn, low, K) != 0:
                fail = 1
                break
            mat_vec(lam, fp, v, K, n)
            for i in range(K):
                v[i] = y[t - 1, i] - v[i]
                sv[i] = v[i]
            cho_solve_vec(low, sv, K)
            for i in range(K):
                for j in range(n):
                    sol[i, j] = cp[i, j]
            cho_solve_mat(low, sol, K, n)      # sol = S^{-1} (Lam P)

            logdet = 0.0
            for i in range(K):
                logdet += log(low[i, i])
            quad = 0.0
            for i in range(K):
                quad += v[i] * sv[i]
            ll_t = -0.5 * (K * LOG_2PI + 2.0 * logdet + quad)
            loglik += ll_t
            step_ll[t] = ll_t

            # update
            for i in range(n):
                filt_mean[t, i] = fp[i]
                for j in range(K):
                    gain[t, i, j] = sol[j, i]          # gain = (S^{-1} Lam P)'
                    filt_mean[t, i] += sol[j, i] * v[j]
            for i in range(n):
                for j in range(n):
                    filt_cov[t, i, j] = pred_cov[t, i, j]
            # filt_cov -= gain @ cp
            for i in range(n):
                for j in range(n):
                    quad = 0.0
                    for p in range(K):
                        quad += gain[t, i, p] * cp[p, j]
                    filt_cov[t, i, j] -= quad
            symmetrise(filt_cov[t], n)

    if fail:
        raise NumericalError("covariance matrix is not positive definite "
                             "(jitter escalation exhausted)")
    return (pred_mean_np, pred_cov_np, filt_mean_np, filt_cov_np, gain_np,
            step_ll_np, loglik)


def smoother_pass(double[:, ::1] lam, double[:, ::1] phi,
                  double[:, ::1] gain_last,
                  double[:, :, ::1] pred_cov, double[:, ::1] filt_mean,
                  double[:, :, ::1] filt_cov):
    """Backward smoothing recursion; same contract as the NumPy twin."""
    cdef Py_ssize_t T = filt_mean.shape[0] - 1
    cdef Py_ssize_t n = filt_mean.shape[1]
    cdef Py_ssize_t K = lam.shape[0]
    cdef Py_ssize_t t, i, j, k

    smooth_mean_np = np.zeros((T + 1, n))
    smooth_cov_np = np.zeros((T + 1, n, n))
    sm_gain_np = np.zeros((T + 1, n, n))
    lag_cov_np = np.zeros((T + 1, n, n))
    cdef double[:, ::1] smooth_mean = smooth_mean_np
    cdef double[:, :, ::1] smooth_cov = smooth_cov_np
    cdef double[:, :, ::1] sm_gain = sm_gain_np
    cdef double[:, :, ::1] lag_cov = lag_cov_np

    low_np = np.zeros((n, n))
    tmp_np = np.zeros((n, n))
    tmp2_np = np.zeros((n, n))
    tmp3_np = np.zeros((n, n))
    dv_np = np.zeros(n)
    dv2_np = np.zeros(n)
    cdef double[:, ::1] low = low_np
    cdef double[:, ::1] tmp = tmp_np
    cdef double[:, ::1] tmp2 = tmp2_np
    cdef double[:, ::1] tmp3 = tmp3_np
    cdef double[::1] dv = dv_np
    cdef double[::1] dv2 = dv2_np

    cdef int fail_t = -1

    for i in range(n):
        smooth_mean[T, i] = filt_mean[T, i]
        for j in range(n):
            smooth_cov[T, i, j] = filt_cov[T, i, j]

    with nogil:
        for t in range(T, 0, -1):
            for i in range(n):
                for j in range(n):
                    low[i, j] = pred_cov[t, i, j]
            if chol_lower(low, n) != 0:
                fail_t = t
                break
            mat_mul(phi, filt_cov[t - 1], tmp, n, n, n)
            cho_solve_mat(low, tmp, n, n)          # tmp = Ppred^{-1} Phi Pfilt
            for i in range(n):
                for j in range(n):
                    sm_gain[t - 1, i, j] = tmp[j, i]

            # mean
            mat_vec(phi, filt_mean[t - 1], dv, n, n)
            for i in range(n):
                dv[i] = smooth_mean[t, i] - dv[i]
            mat_vec(sm_gain[t - 1], dv, dv2, n, n)
            for i in range(n):
                smooth_mean[t - 1, i] = filt_mean[t - 1, i] + dv2[i]

            # covariance
            for i in range(n):
                for j in range(n):
                    tmp[i, j] = smooth_cov[t, i, j] - pred_cov[t, i, j]
            mat_mul(sm_gain[t - 1], tmp, tmp2, n, n, n)
            mat_mul_bt(tmp2, sm_gain[t - 1], tmp3, n, n, n)
            for i in range(n):
                for j in range(n):
                    smooth_cov[t - 1, i, j] = filt_cov[t - 1, i, j] + tmp3[i, j]
            symmetrise(smooth_cov[t - 1], n)

    if fail_t >= 0:
        raise NumericalError(
            f"singular one-step prediction covariance at t={fail_t}")

    # terminal smoothed lag-one covariance: (I - K_T Lam) Phi P_{T-1|T-1}
    ikl_np = np.zeros((n, n))
    cdef double[:, ::1] ikl = ikl_np
    with nogil:
        mat_mul(gain_last, lam, ikl, n, K, n)
        for i in range(n):
            for j in range(n):
                ikl[i, j] = -ikl[i, j]
            ikl[i, i] += 1.0
        mat_mul(ikl, phi, tmp, n, n, n)
        mat_mul(tmp, filt_cov[T - 1], lag_cov[T], n, n, n)

        for t in range(T, 1, -1):
            # lag_cov[t-1] = Pf[t-1] J[t-2]' + J[t-1] (lag_cov[t] - Phi Pf[t-1]) J[t-2]'
            mat_mul(phi, filt_cov[t - 1], tmp, n, n, n)
            for i in range(n):
                for j in range(n):
                    tmp[i, j] = lag_cov[t, i, j] - tmp[i, j]
            mat_mul(sm_gain[t - 1], tmp, tmp2, n, n, n)
            for i in range(n):
                for j in range(n):
                    tmp2[i, j] += filt_cov[t - 1, i, j]
            mat_mul_bt(tmp2, sm_gain[t - 2], lag_cov[t - 1], n, n, n)

    return smooth_mean_np, smooth_cov_np, sm_gain_np, lag_cov_np
