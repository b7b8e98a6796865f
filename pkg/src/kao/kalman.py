"""Filtering, smoothing, and likelihood fitting for linear-Gaussian models.

Two filtering conventions live side by side here, on purpose:

* :func:`kalman_step` is the online recursion used by the experts.  Its
  gain normalizes the innovation by ``x'Px + 1`` — the observation noise
  is implicitly 1 — so it never needs ``sigma2`` to produce predictions;
  the noise variance only enters the predictive risk ``x'Px + sigma2``.
  When ``sigma2 == 1`` this recursion coincides with exact Gaussian
  conditioning (see :func:`exact_filter_oracle`).
* :func:`rts_smooth` and :func:`em_fit` use the standard sigma2-aware
  filter, since likelihood evaluation and EM require exact conditioning
  under the current parameter values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .models import StateSpaceModel, psd_sqrt  # noqa: F401  (psd_sqrt re-exported for callers)

__all__ = [
    "KalmanState",
    "init_kalman_state",
    "kalman_predict",
    "kalman_step",
    "ridge_oracle",
    "exact_filter_oracle",
    "exact_smoother_oracle",
    "SmoothedPath",
    "rts_smooth",
    "EMFit",
    "em_fit",
]

# Brute-force oracles build dense joint Gaussians; cap the instance size.
ORACLE_MAX_T = 50
ORACLE_MAX_DIM = 4


@dataclass(frozen=True)
class KalmanState:
    """Running filter state.

    ``theta_hat``/``P`` describe the belief about theta_t given
    y_1..y_{t-1}; the state predicts y_t.  ``last_pred`` and
    ``last_risk`` hold the prediction and risk formed at the most
    recently completed step (NaN before the first step).
    """

    theta_hat: np.ndarray
    P: np.ndarray
    t: int
    last_pred: float = math.nan
    last_risk: float = math.nan


def init_kalman_state(model: StateSpaceModel) -> KalmanState:
    """Initial predictive belief about theta_1.

    The initial transition is folded in: with prior theta_0 ~
    N(theta0, P0), the belief about theta_1 before any data is
    N(K theta0, K P0 K' + Q), which is what the first prediction must
    use to agree with exact conditioning.
    """
    theta1 = model.K @ model.theta0
    P1 = model.K @ model.P0 @ model.K.T + model.Q
    return KalmanState(theta_hat=theta1, P=0.5 * (P1 + P1.T), t=1)


def _check_x(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (dim,):
        raise ValueError(f"design row must have shape ({dim},), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("design row contains non-finite values")
    return x


def kalman_predict(state: KalmanState, x_next, sigma2: float) -> tuple[float, float]:
    """One-step prediction and predictive risk for the design row ``x_next``.

    Returns ``(y_hat, risk)`` with ``y_hat = x' theta_hat`` and
    ``risk = x' P x + sigma2``.  Pure: the state is not modified.
    """
    x = _check_x(x_next, state.theta_hat.shape[0])
    if sigma2 <= 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    y_hat = float(x @ state.theta_hat)
    risk = float(x @ state.P @ x) + float(sigma2)
    return y_hat, risk


def kalman_step(
    model: StateSpaceModel, state: KalmanState, x, y: float
) -> KalmanState:
    """Advance the online recursion by one observation.

    With g = 1 / (x'Px + 1):

        theta' = K (theta_hat + g P x (y - y_hat))
        P'     = K (P - g P x x' P) K' + Q

    The innovation is normalized by ``x'Px + 1``, i.e. the observation
    noise is implicitly unit-variance; ``model.sigma2`` is only used to
    report the risk stored on the returned state.
    """
    x = _check_x(x, model.dim)
    y = float(y)
    if not math.isfinite(y):
        raise ValueError(f"observation must be finite, got {y}")
    P = state.P
    Px = P @ x
    quad = float(x @ Px)
    denom = quad + 1.0
    if denom <= 0.0:
        raise RuntimeError(
            f"non-positive innovation normalizer {denom:.3e} at t={state.t}; "
            "P has lost positive semi-definiteness"
        )
    y_hat = float(x @ state.theta_hat)
    g = 1.0 / denom
    theta_next = model.K @ (state.theta_hat + g * Px * (y - y_hat))
    corrected = P - g * np.outer(Px, Px)
    P_next = model.K @ corrected @ model.K.T + model.Q
    P_next = 0.5 * (P_next + P_next.T)
    return KalmanState(
        theta_hat=theta_next,
        P=P_next,
        t=state.t + 1,
        last_pred=y_hat,
        last_risk=quad + model.sigma2,
    )


def ridge_oracle(lam: float, theta_start: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Closed-form minimizer of sum_s (y_s - x_s'theta)^2 + lam * ||theta - theta_start||^2.

    In the static case (K = I, Q = 0, P0 = I/lam) the online recursion
    reproduces this estimate exactly after each observation, which makes
    this the independent reference for the recursive path.
    """
    if lam <= 0:
        raise ValueError(f"lam must be positive, got {lam}")
    theta_start = np.asarray(theta_start, dtype=float).reshape(-1)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.ndim != 2 or X.shape[1] != theta_start.shape[0] or X.shape[0] != y.shape[0]:
        raise ValueError(
            f"inconsistent shapes: X {X.shape}, y {y.shape}, theta_start {theta_start.shape}"
        )
    d = theta_start.shape[0]
    G = lam * np.eye(d) + X.T @ X
    b = lam * theta_start + X.T @ y
    return np.linalg.solve(G, b)


# ---------------------------------------------------------------------------
# Brute-force joint-Gaussian oracles
# ---------------------------------------------------------------------------

def _joint_moments(model: StateSpaceModel, X: np.ndarray, y: np.ndarray):
    """Dense moments of (theta_0..theta_T, y_1..y_T) under the filter's model.

    The initial state is treated as theta_0 ~ N(theta0, P0) — the prior
    the filter starts from — and the observation noise has variance
    ``model.sigma2``.

    Returns ``(th_mean, C_diag, k_pows, y_mean, S_yy)`` where
    ``C_diag[i] = Cov(theta_i, theta_i)`` and ``k_pows[j] = K^j``;
    cross-covariances follow from
    ``Cov(theta_s, theta_t) = C_diag[s] @ (K^(t-s))' for s <= t``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    T = y.shape[0]
    d = model.dim
    if X.shape != (T, d):
        raise ValueError(f"design must have shape ({T}, {d}), got {X.shape}")
    if T > ORACLE_MAX_T or d > ORACLE_MAX_DIM:
        raise ValueError(
            f"oracle limited to T <= {ORACLE_MAX_T}, dim <= {ORACLE_MAX_DIM}; "
            f"got T={T}, dim={d}"
        )
    k_pows = [np.eye(d)]
    for _ in range(T):
        k_pows.append(model.K @ k_pows[-1])
    th_mean = [model.theta0]
    C_diag = [model.P0]
    for _ in range(T):
        th_mean.append(model.K @ th_mean[-1])
        C_diag.append(model.K @ C_diag[-1] @ model.K.T + model.Q)

    def cov_th(s: int, t: int) -> np.ndarray:
        if s <= t:
            return C_diag[s] @ k_pows[t - s].T
        return k_pows[s - t] @ C_diag[t]

    y_mean = np.array([X[t - 1] @ th_mean[t] for t in range(1, T + 1)])
    S_yy = np.empty((T, T))
    for s in range(1, T + 1):
        for t in range(s, T + 1):
            v = float(X[s - 1] @ cov_th(s, t) @ X[t - 1])
            S_yy[s - 1, t - 1] = v
            S_yy[t - 1, s - 1] = v
    S_yy[np.diag_indices(T)] += model.sigma2
    return th_mean, C_diag, k_pows, y_mean, S_yy, cov_th


def exact_filter_oracle(
    model: StateSpaceModel, X: np.ndarray, y: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Predictive moments E[theta_t | y_1..y_{t-1}] by dense conditioning.

    Forms the joint Gaussian of all states and observations explicitly
    and conditions with a dense solve — brute-force ground truth for the
    recursive filter.  Returns ``(means, covs)`` of shapes (T, d) and
    (T, d, d) for t = 1..T; row 0 is the prior (K theta0, K P0 K' + Q).
    """
    th_mean, C_diag, k_pows, y_mean, S_yy, cov_th = _joint_moments(model, X, y)
    y = np.asarray(y, dtype=float).reshape(-1)
    X = np.asarray(X, dtype=float)
    T, d = X.shape
    means = np.empty((T, d))
    covs = np.empty((T, d, d))
    for t in range(1, T + 1):
        n_obs = t - 1
        if n_obs == 0:
            means[0] = th_mean[1]
            covs[0] = C_diag[1]
            continue
        cross = np.column_stack(
            [cov_th(t, s) @ X[s - 1] for s in range(1, n_obs + 1)]
        )
        S = S_yy[:n_obs, :n_obs]
        resid = y[:n_obs] - y_mean[:n_obs]
        gain = np.linalg.solve(S, cross.T).T
        means[t - 1] = th_mean[t] + gain @ resid
        cov = C_diag[t] - gain @ cross.T
        covs[t - 1] = 0.5 * (cov + cov.T)
    return means, covs


def exact_smoother_oracle(
    model: StateSpaceModel, X: np.ndarray, y: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Smoothed moments E[theta_t | y_1..y_T] for t = 0..T by dense conditioning.

    Returns ``(means, covs, lag_covs)`` with shapes (T+1, d), (T+1, d, d)
    and (T, d, d); row i corresponds to time i (row 0 is the initial
    state), and ``lag_covs[t-1] = Cov(theta_t, theta_{t-1} | y_1..y_T)``.
    """
    th_mean, C_diag, k_pows, y_mean, S_yy, cov_th = _joint_moments(model, X, y)
    y = np.asarray(y, dtype=float).reshape(-1)
    X = np.asarray(X, dtype=float)
    T, d = X.shape
    resid = y - y_mean
    solve_S = np.linalg.solve(S_yy, np.eye(T))
    crosses = []
    for t in range(0, T + 1):
        crosses.append(
            np.column_stack([cov_th(t, s) @ X[s - 1] for s in range(1, T + 1)])
        )
    means = np.empty((T + 1, d))
    covs = np.empty((T + 1, d, d))
    for t in range(0, T + 1):
        gain = crosses[t] @ solve_S
        means[t] = th_mean[t] + gain @ resid
        cov = C_diag[t] - gain @ crosses[t].T
        covs[t] = 0.5 * (cov + cov.T)
    lag_covs = np.empty((T, d, d))
    for t in range(1, T + 1):
        gain_t = crosses[t] @ solve_S
        lag_covs[t - 1] = cov_th(t, t - 1) - gain_t @ crosses[t - 1].T
    return means, covs, lag_covs


# ---------------------------------------------------------------------------
# Standard sigma2-aware smoothing and EM
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SmoothedPath:
    """Output of the fixed-interval smoother.

    ``theta_smooth``/``V_smooth`` hold E[theta_t | y_1..T] and its
    covariance for t = 1..T; ``V_lag[t-1] = Cov(theta_t, theta_{t-1} |
    y_1..T)``; the initial state's smoothed moments are kept separately
    so the horizon-length arrays stay aligned with the stream.
    """

    theta_smooth: np.ndarray
    V_smooth: np.ndarray
    V_lag: np.ndarray
    loglik: float
    theta0_smooth: np.ndarray
    V0_smooth: np.ndarray


def _solve_psd(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve A x = B for symmetric PSD A, falling back to pseudo-inverse."""
    try:
        return np.linalg.solve(A, B)
    except np.linalg.LinAlgError:
        return np.linalg.pinv(A) @ B


def rts_smooth(model: StateSpaceModel, X: np.ndarray, y: np.ndarray) -> SmoothedPath:
    """Fixed-interval smoothing with the exact Gaussian log-likelihood.

    Runs the standard sigma2-aware filter (innovation variance
    ``x'Px + sigma2``) followed by the backward smoothing pass, with
    lag-one covariances from ``Cov(theta_t, theta_{t-1} | y) =
    V_smooth[t] @ J_{t-1}'``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    T = y.shape[0]
    d = model.dim
    if X.shape != (T, d):
        raise ValueError(f"design must have shape ({T}, {d}), got {X.shape}")
    if T < 1:
        raise ValueError("empty stream")

    pred_mean = np.empty((T, d))
    pred_cov = np.empty((T, d, d))
    filt_mean = np.empty((T, d))
    filt_cov = np.empty((T, d, d))
    loglik = 0.0

    m = model.K @ model.theta0
    P = model.K @ model.P0 @ model.K.T + model.Q
    for t in range(T):
        pred_mean[t] = m
        pred_cov[t] = 0.5 * (P + P.T)
        x = X[t]
        Px = pred_cov[t] @ x
        s = float(x @ Px) + model.sigma2
        if s <= 0.0 or not math.isfinite(s):
            raise RuntimeError(
                f"non-positive innovation variance {s:.3e} at t={t + 1}"
            )
        innov = y[t] - float(x @ m)
        loglik += -0.5 * (math.log(2.0 * math.pi * s) + innov * innov / s)
        gain = Px / s
        fm = m + gain * innov
        fc = pred_cov[t] - np.outer(gain, Px)
        filt_mean[t] = fm
        filt_cov[t] = 0.5 * (fc + fc.T)
        m = model.K @ fm
        P = model.K @ filt_cov[t] @ model.K.T + model.Q

    theta_smooth = np.empty((T, d))
    V_smooth = np.empty((T, d, d))
    V_lag = np.empty((T, d, d))
    theta_smooth[T - 1] = filt_mean[T - 1]
    V_smooth[T - 1] = filt_cov[T - 1]
    for t in range(T - 2, -1, -1):
        J = filt_cov[t] @ model.K.T @ _solve_psd(pred_cov[t + 1], np.eye(d))
        theta_smooth[t] = filt_mean[t] + J @ (theta_smooth[t + 1] - pred_mean[t + 1])
        V = filt_cov[t] + J @ (V_smooth[t + 1] - pred_cov[t + 1]) @ J.T
        V_smooth[t] = 0.5 * (V + V.T)
        V_lag[t + 1] = V_smooth[t + 1] @ J.T
    J0 = model.P0 @ model.K.T @ _solve_psd(pred_cov[0], np.eye(d))
    theta0_smooth = model.theta0 + J0 @ (theta_smooth[0] - pred_mean[0])
    V0 = model.P0 + J0 @ (V_smooth[0] - pred_cov[0]) @ J0.T
    V_lag[0] = V_smooth[0] @ J0.T
    return SmoothedPath(
        theta_smooth=theta_smooth,
        V_smooth=V_smooth,
        V_lag=V_lag,
        loglik=float(loglik),
        theta0_smooth=theta0_smooth,
        V0_smooth=0.5 * (V0 + V0.T),
    )


@dataclass(frozen=True)
class EMFit:
    """Result of :func:`em_fit`: fitted model plus the log-likelihood path."""

    model: StateSpaceModel
    logliks: np.ndarray
    converged: bool


def em_fit(
    X: np.ndarray,
    y: np.ndarray,
    init: StateSpaceModel,
    n_iter: int = 50,
    tol: float = 1e-8,
    fixed_K: bool = True,
    update_theta0: bool = False,
    min_sigma2: float = 1e-12,
) -> EMFit:
    """Estimate Q and sigma2 (optionally theta0) by expectation-maximization.

    The E-step is :func:`rts_smooth`; the M-step applies the closed-form
    updates

        Q      <- (S11 - S10 K' - K S10' + K S00 K') / T
        sigma2 <- mean((y_t - x_t'm_t)^2 + x_t' V_t x_t)

    with S11, S10, S00 the smoothed second moments of consecutive state
    pairs.  The transition matrix is never estimated; ``fixed_K`` must
    remain True.  The log-likelihood sequence is checked to be
    non-decreasing up to a 1e-9 relative slack and returned for
    inspection.

    Convergence: stop when the log-likelihood improves by less than
    ``tol * (1 + |loglik|)`` between iterations.
    """
    if n_iter < 1:
        raise ValueError(f"n_iter must be >= 1, got {n_iter}")
    if not fixed_K:
        raise ValueError("transition-matrix estimation is not supported; keep fixed_K=True")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    T = y.shape[0]
    model = init
    logliks: list[float] = []
    converged = False
    for it in range(n_iter):
        path = rts_smooth(model, X, y)
        ll = path.loglik
        if not math.isfinite(ll):
            raise RuntimeError(f"non-finite log-likelihood at EM iteration {it}")
        if logliks and ll < logliks[-1] - 1e-9 * (1.0 + abs(logliks[-1])):
            raise RuntimeError(
                f"log-likelihood decreased at EM iteration {it}: "
                f"{logliks[-1]:.12g} -> {ll:.12g}"
            )
        if logliks and abs(ll - logliks[-1]) <= tol * (1.0 + abs(logliks[-1])):
            logliks.append(ll)
            converged = True
            break
        logliks.append(ll)

        means = np.vstack([path.theta0_smooth[None, :], path.theta_smooth])
        covs = np.concatenate([path.V0_smooth[None, :, :], path.V_smooth], axis=0)
        S11 = covs[1:].sum(axis=0) + means[1:].T @ means[1:]
        S00 = covs[:-1].sum(axis=0) + means[:-1].T @ means[:-1]
        S10 = path.V_lag.sum(axis=0) + means[1:].T @ means[:-1]
        K = model.K
        Q_new = (S11 - S10 @ K.T - K @ S10.T + K @ S00 @ K.T) / T
        Q_new = 0.5 * (Q_new + Q_new.T)
        eigvals, eigvecs = np.linalg.eigh(Q_new)
        Q_new = (eigvecs * np.clip(eigvals, 0.0, None)) @ eigvecs.T
        Q_new = 0.5 * (Q_new + Q_new.T)
        resid = y - np.einsum("td,td->t", X, path.theta_smooth)
        quad = np.einsum("td,tde,te->t", X, path.V_smooth, X)
        sigma2_new = max(float(np.mean(resid**2 + quad)), min_sigma2)
        theta0_new = path.theta0_smooth if update_theta0 else model.theta0
        model = StateSpaceModel(
            K=model.K, Q=Q_new, sigma2=sigma2_new, theta0=theta0_new, P0=model.P0
        )
    return EMFit(model=model, logliks=np.asarray(logliks), converged=converged)
