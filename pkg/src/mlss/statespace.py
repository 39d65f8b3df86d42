"""Augmented linear-Gaussian state-space core.

The observation/state system is

    S_t     = Lam~ F~_t + eps_t,      eps_t ~ N(0, R),   R diagonal
    F~_t    = Phi~ F~_{t-1} + v_t,    v_t  ~ N(0, Q~)

where the state F~_t stacks q persistent random-walk factors on top of K
stationary series-specific components, and the system matrices carry the
block structure

    Lam~ = [Lambda | I_K]                  (K x (q+K))
    Phi~ = blockdiag(I_q, diag(phi))       ((q+K) x (q+K))
    Q~   = blockdiag(Q_long, Q_short).

This module holds the specification container plus the three core
operations: forward Kalman filter, backward fixed-interval smoother, and the
exact prediction-error log-likelihood.  The per-step recursions are delegated
to a kernel backend (compiled extension or NumPy twin, see ``mlss._kernels``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import active_backend, backend
from .exceptions import NumericalError

__all__ = [
    "StateSpaceSpec",
    "FilterOutput",
    "SmootherOutput",
    "kalman_filter",
    "kalman_smoother",
    "loglikelihood",
    "active_backend",
]


def _as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


@dataclass
class StateSpaceSpec:
    """Parameter container for the augmented system.

    Attributes
    ----------
    lambda_tilde : (K, q+K) observation matrix [Lambda | I_K].
    phi_tilde : (q+K, q+K) transition matrix blockdiag(I_q, diag(phi)).
    q_tilde : (q+K, q+K) state innovation covariance blockdiag(Q_long, Q_short).
    r : (K, K) diagonal observation noise covariance.
    a : (q+K,) initial state mean.
    sigma0 : (q+K, q+K) initial state covariance.
    n_factors : number q of persistent factors.
    n_series : number K of observed series.
    """

    lambda_tilde: np.ndarray
    phi_tilde: np.ndarray
    q_tilde: np.ndarray
    r: np.ndarray
    a: np.ndarray
    sigma0: np.ndarray
    n_factors: int
    n_series: int

    def __post_init__(self):
        self.lambda_tilde = _as_f64(self.lambda_tilde)
        self.phi_tilde = _as_f64(self.phi_tilde)
        self.q_tilde = _as_f64(self.q_tilde)
        self.r = _as_f64(self.r)
        self.a = _as_f64(self.a).reshape(-1)
        self.sigma0 = _as_f64(self.sigma0)

    # -- convenience views -------------------------------------------------

    @property
    def dim_state(self) -> int:
        return self.n_factors + self.n_series

    @property
    def lam(self) -> np.ndarray:
        """Free loading block Lambda (K x q)."""
        return self.lambda_tilde[:, : self.n_factors]

    @property
    def phi_diag(self) -> np.ndarray:
        """Diagonal of the stationary block of Phi~ (length K)."""
        return np.diag(self.phi_tilde)[self.n_factors:]

    @property
    def q_long(self) -> np.ndarray:
        q = self.n_factors
        return self.q_tilde[:q, :q]

    @property
    def q_short(self) -> np.ndarray:
        q = self.n_factors
        return self.q_tilde[q:, q:]

    @property
    def r_diag(self) -> np.ndarray:
        return np.diag(self.r)

    def copy(self) -> "StateSpaceSpec":
        return StateSpaceSpec(
            self.lambda_tilde.copy(), self.phi_tilde.copy(),
            self.q_tilde.copy(), self.r.copy(), self.a.copy(),
            self.sigma0.copy(), self.n_factors, self.n_series)

    # -- validation --------------------------------------------------------

    def validate(self, identified: bool = False) -> None:
        """Check shapes, block structure and positive semi-definiteness.

        With ``identified=True`` additionally require the identification
        normalisation: Q_long = I_q exactly and zeros strictly above the main
        diagonal of Lambda.
        """
        q, K, n = self.n_factors, self.n_series, self.dim_state
        if q < 0 or K < 1:
            raise ValueError("need n_factors >= 0 and n_series >= 1")
        shapes = {
            "lambda_tilde": (self.lambda_tilde.shape, (K, n)),
            "phi_tilde": (self.phi_tilde.shape, (n, n)),
            "q_tilde": (self.q_tilde.shape, (n, n)),
            "r": (self.r.shape, (K, K)),
            "a": (self.a.shape, (n,)),
            "sigma0": (self.sigma0.shape, (n, n)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise ValueError(f"{name}: expected shape {want}, got {got}")
        if not all(np.isfinite(m).all() for m in
                   (self.lambda_tilde, self.phi_tilde, self.q_tilde, self.r,
                    self.a, self.sigma0)):
            raise ValueError("spec contains non-finite entries")

        # observation matrix: right K x K block is the identity
        if not np.array_equal(self.lambda_tilde[:, q:], np.eye(K)):
            raise ValueError("lambda_tilde must end in an identity block")

        # transition matrix: blockdiag(I_q, diag(phi))
        if not np.array_equal(self.phi_tilde[:q, :q], np.eye(q)):
            raise ValueError("phi_tilde must carry I_q in its top-left block")
        if np.any(self.phi_tilde[:q, q:] != 0.0) or np.any(self.phi_tilde[q:, :q] != 0.0):
            raise ValueError("phi_tilde must be block diagonal")
        short = self.phi_tilde[q:, q:]
        if np.any(short[~np.eye(K, dtype=bool)] != 0.0):
            raise ValueError("the stationary block of phi_tilde must be diagonal")

        # covariance structure
        for name, m in (("q_tilde", self.q_tilde), ("sigma0", self.sigma0)):
            if not np.allclose(m, m.T, rtol=0.0, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
            w = np.linalg.eigvalsh(0.5 * (m + m.T))
            floor = -1e-10 * max(1.0, float(np.abs(w).max(initial=0.0)))
            if w.min(initial=0.0) < floor:
                raise ValueError(f"{name} must be positive semi-definite")
        if np.any(self.q_tilde[:q, q:] != 0.0) or np.any(self.q_tilde[q:, :q] != 0.0):
            raise ValueError("q_tilde must be block diagonal")
        if np.any(self.r[~np.eye(K, dtype=bool)] != 0.0):
            raise ValueError("r must be diagonal")
        if np.any(np.diag(self.r) < 0.0):
            raise ValueError("r must have a nonnegative diagonal")

        if identified:
            if not np.array_equal(self.q_long, np.eye(q)):
                raise ValueError("identification requires Q_long = I_q")
            iu = np.triu_indices(min(K, q), k=1, m=q)
            if iu[0].size and np.any(self.lam[iu] != 0.0):
                raise ValueError("identification requires zeros strictly above "
                                 "the main diagonal of Lambda")


@dataclass
class FilterOutput:
    """Forward-pass moments.  Index t of every array refers to time t; index 0
    holds the initial state (prior), observations occupy 1..T."""

    pred_mean: np.ndarray     # (T+1, n)  F~_{t|t-1}
    pred_cov: np.ndarray      # (T+1, n, n)  P_{t|t-1}
    filt_mean: np.ndarray     # (T+1, n)  F~_{t|t}
    filt_cov: np.ndarray      # (T+1, n, n)  P_{t|t}
    gain: np.ndarray          # (T+1, n, K)  K_t
    step_loglik: np.ndarray   # (T+1,) per-step prediction-error log-density
    loglik: float

    @property
    def n_obs(self) -> int:
        return self.pred_mean.shape[0] - 1


@dataclass
class SmootherOutput:
    """Backward-pass moments, same time indexing as :class:`FilterOutput`.
    ``lag_cov[t]`` is the smoothed covariance Cov(F~_t, F~_{t-1} | S_1..T),
    valid for t >= 1; ``smoother_gain[t]`` is J_t, valid for t <= T-1."""

    smooth_mean: np.ndarray   # (T+1, n)  F~_{t|T}
    smooth_cov: np.ndarray    # (T+1, n, n)  P_{t|T}
    smoother_gain: np.ndarray  # (T+1, n, n)  J_t
    lag_cov: np.ndarray       # (T+1, n, n)  P_{t,t-1|T}


def _check_panel(spec: StateSpaceSpec, panel: np.ndarray) -> np.ndarray:
    panel = _as_f64(panel)
    if panel.ndim != 2:
        raise ValueError("panel must be a T x K array")
    if panel.shape[0] < 1:
        raise ValueError("panel must contain at least one observation")
    if panel.shape[1] != spec.n_series:
        raise ValueError(f"panel has {panel.shape[1]} columns, "
                         f"spec expects {spec.n_series}")
    if not np.isfinite(panel).all():
        raise ValueError("panel contains non-finite entries; fill missing "
                         "values before filtering")
    return panel


def kalman_filter(spec: StateSpaceSpec, panel: np.ndarray) -> FilterOutput:
    """Run the forward recursion over a complete T x K panel.

    Raises :class:`~mlss.exceptions.NumericalError` if an innovation
    covariance cannot be factorised even after jitter escalation, and
    ``ValueError`` on shape problems or non-finite observations.
    """
    spec.validate()
    panel = _check_panel(spec, panel)
    out = backend.filter_pass(
        spec.lambda_tilde, spec.phi_tilde, spec.q_tilde,
        spec.r_diag.astype(np.float64, copy=True), spec.a, spec.sigma0, panel)
    pred_mean, pred_cov, filt_mean, filt_cov, gain, step_ll, ll = out
    return FilterOutput(pred_mean, pred_cov, filt_mean, filt_cov, gain,
                        step_ll, float(ll))


def kalman_smoother(spec: StateSpaceSpec, filt: FilterOutput) -> SmootherOutput:
    """Run the backward fixed-interval recursion over a filter output.

    Prediction covariances must be invertible; a singular one indicates a
    degenerate specification and raises :class:`NumericalError` (no
    pseudo-inverse fallback).
    """
    if filt.n_obs < 1:
        raise ValueError("smoother needs at least one observation")
    sm, sc, jg, lc = backend.smoother_pass(
        spec.lambda_tilde, spec.phi_tilde,
        np.ascontiguousarray(filt.gain[-1]),
        filt.pred_cov, filt.filt_mean, filt.filt_cov)
    return SmootherOutput(sm, sc, jg, lc)


def loglikelihood(spec: StateSpaceSpec, panel: np.ndarray) -> float:
    """Exact Gaussian log-likelihood of the panel under the spec
    (prediction-error decomposition of the forward pass)."""
    return kalman_filter(spec, panel).loglik
