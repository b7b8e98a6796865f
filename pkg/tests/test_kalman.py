"""Filter recursion against closed-form and brute-force oracles."""

import math

import numpy as np
import pytest

from kao.kalman import (
    EMFit,
    KalmanState,
    em_fit,
    exact_filter_oracle,
    exact_smoother_oracle,
    init_kalman_state,
    kalman_predict,
    kalman_step,
    ridge_oracle,
    rts_smooth,
)
from kao.models import StateSpaceModel, simulate_ssm


def _random_model(rng, d, sigma2=None, contracting=True):
    A = rng.standard_normal((d, d))
    K = 0.9 * A / max(np.abs(np.linalg.eigvals(A)).max(), 1e-9) if contracting else np.eye(d)
    B = rng.standard_normal((d, d))
    Q = 0.3 * B @ B.T
    C = rng.standard_normal((d, d))
    P0 = 0.5 * C @ C.T + 0.1 * np.eye(d)
    return StateSpaceModel(
        K=K,
        Q=Q,
        sigma2=float(rng.uniform(0.5, 2.0)) if sigma2 is None else sigma2,
        theta0=rng.standard_normal(d),
        P0=P0,
    )


class TestInitAndStep:
    def test_init_folds_one_transition(self):
        # theta_1 = K theta0, P_1 = K P0 K' + Q; with K=2, theta0=1,
        # P0=1, Q=0.5 that is (2, 4.5).
        m = StateSpaceModel(
            K=2.0 * np.eye(1), Q=0.5 * np.eye(1), sigma2=1.0, theta0=np.ones(1), P0=np.eye(1)
        )
        s = init_kalman_state(m)
        assert s.theta_hat[0] == pytest.approx(2.0)
        assert s.P[0, 0] == pytest.approx(4.5)
        assert s.t == 1 and math.isnan(s.last_pred)

    def test_predict_is_pure_and_correct(self):
        s = KalmanState(theta_hat=np.array([0.5]), P=np.array([[0.5]]), t=1)
        y_hat, risk = kalman_predict(s, np.ones(1), sigma2=1.0)
        assert (y_hat, risk) == (0.5, 1.5)
        y_hat, risk = kalman_predict(s, np.zeros(1), sigma2=1.0)
        assert (y_hat, risk) == (0.0, 1.0)
        assert s.P[0, 0] == 0.5  # unchanged

    def test_step_records_prediction_and_risk(self):
        m = StateSpaceModel(
            K=np.eye(1), Q=np.zeros((1, 1)), sigma2=1.0, theta0=np.zeros(1), P0=np.eye(1)
        )
        s = init_kalman_state(m)
        s = kalman_step(m, s, np.ones(1), y=1.0)
        # Before the update: y_hat = 0, x'Px = 1, so risk = 2 and the
        # posterior mean is g*P*x*y = 0.5.
        assert s.last_pred == pytest.approx(0.0)
        assert s.last_risk == pytest.approx(2.0)
        assert s.theta_hat[0] == pytest.approx(0.5)
        assert s.P[0, 0] == pytest.approx(0.5)

    def test_step_rejects_bad_inputs(self):
        m = StateSpaceModel(
            K=np.eye(2), Q=np.zeros((2, 2)), sigma2=1.0, theta0=np.zeros(2), P0=np.eye(2)
        )
        s = init_kalman_state(m)
        with pytest.raises(ValueError, match="shape"):
            kalman_step(m, s, np.ones(3), 0.0)
        with pytest.raises(ValueError, match="finite"):
            kalman_step(m, s, np.ones(2), float("inf"))


class TestRidgeEquivalence:
    def test_static_recursion_is_ridge_path(self):
        # K=I, Q=0, P0=I/lam: after each step the online estimate equals
        # the penalized least-squares solution on the data so far.
        rng = np.random.default_rng(7)
        d, T, lam = 3, 40, 2.0
        theta_start = rng.standard_normal(d)
        model = StateSpaceModel(
            K=np.eye(d),
            Q=np.zeros((d, d)),
            sigma2=1.0,
            theta0=theta_start,
            P0=np.eye(d) / lam,
        )
        X = rng.uniform(-1, 1, size=(T, d))
        y = rng.standard_normal(T)
        s = init_kalman_state(model)
        for t in range(T):
            s = kalman_step(model, s, X[t], y[t])
            ref = ridge_oracle(lam, theta_start, X[: t + 1], y[: t + 1])
            assert np.abs(s.theta_hat - ref).max() < 1e-8

    def test_ridge_oracle_solves_normal_equations(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((20, 2))
        y = rng.standard_normal(20)
        start = rng.standard_normal(2)
        lam = 0.7
        theta = ridge_oracle(lam, start, X, y)
        grad = lam * (theta - start) - X.T @ (y - X @ theta)
        assert np.abs(grad).max() < 1e-10


class TestExactOracles:
    def test_filter_matches_dense_conditioning(self):
        # The recursion normalizes innovations by x'Px + 1, i.e. it is
        # the exact filter for unit observation noise.
        rng = np.random.default_rng(3)
        for _ in range(10):
            d = int(rng.integers(1, 4))
            T = int(rng.integers(2, 15))
            model = _random_model(rng, d, sigma2=1.0)
            X = rng.uniform(-1, 1, size=(T, d))
            y = rng.standard_normal(T) * 2.0
            means, covs = exact_filter_oracle(model, X, y)
            s = init_kalman_state(model)
            for t in range(T):
                assert np.abs(s.theta_hat - means[t]).max() < 1e-8
                assert np.abs(s.P - covs[t]).max() < 1e-8
                s = kalman_step(model, s, X[t], y[t])

    def test_smoother_matches_dense_conditioning(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            d = int(rng.integers(1, 4))
            T = int(rng.integers(3, 12))
            model = _random_model(rng, d)
            X = rng.uniform(-1, 1, size=(T, d))
            y = rng.standard_normal(T)
            means, covs, lag = exact_smoother_oracle(model, X, y)
            path = rts_smooth(model, X, y)
            assert np.abs(path.theta0_smooth - means[0]).max() < 1e-8
            assert np.abs(path.theta_smooth - means[1:]).max() < 1e-8
            assert np.abs(path.V0_smooth - covs[0]).max() < 1e-8
            assert np.abs(path.V_smooth - covs[1:]).max() < 1e-8
            assert np.abs(path.V_lag - lag).max() < 1e-8

    def test_oracle_refuses_large_instances(self):
        model = _random_model(np.random.default_rng(0), 2)
        with pytest.raises(ValueError, match="oracle limited"):
            exact_filter_oracle(model, np.ones((100, 2)), np.ones(100))


class TestEMFit:
    def test_loglik_never_decreases(self):
        rng = np.random.default_rng(11)
        d, T = 2, 120
        truth = StateSpaceModel(
            K=np.eye(d), Q=0.2 * np.eye(d), sigma2=1.5, theta0=np.zeros(d), P0=np.eye(d)
        )
        X = rng.uniform(size=(T, d))
        stream = simulate_ssm(truth, X, seed=2)
        init = truth.replace(Q=np.eye(d), sigma2=0.5)
        fit = em_fit(X, stream.y, init=init, n_iter=25, tol=0.0)
        assert isinstance(fit, EMFit)
        diffs = np.diff(fit.logliks)
        assert (diffs >= -1e-9 * (1.0 + np.abs(fit.logliks[:-1]))).all()

    def test_convergence_flag(self):
        rng = np.random.default_rng(4)
        X = rng.uniform(size=(80, 1))
        truth = StateSpaceModel(
            K=np.eye(1), Q=0.3 * np.eye(1), sigma2=1.0, theta0=np.zeros(1), P0=np.eye(1)
        )
        stream = simulate_ssm(truth, X, seed=8)
        fit = em_fit(X, stream.y, init=truth, n_iter=200, tol=1e-10)
        assert fit.converged

    def test_transition_estimation_is_refused(self):
        m = _random_model(np.random.default_rng(0), 1)
        with pytest.raises(ValueError, match="fixed_K"):
            em_fit(np.ones((10, 1)), np.ones(10), init=m, fixed_K=False)

    def test_improves_misspecified_start(self):
        rng = np.random.default_rng(21)
        d, T = 1, 300
        truth = StateSpaceModel(
            K=np.eye(d), Q=0.5 * np.eye(d), sigma2=1.0, theta0=np.zeros(d), P0=np.eye(d)
        )
        X = rng.uniform(0.5, 1.5, size=(T, d))
        stream = simulate_ssm(truth, X, seed=31)
        init = truth.replace(Q=5.0 * np.eye(d), sigma2=10.0)
        fit = em_fit(X, stream.y, init=init, n_iter=60, tol=1e-9)
        assert abs(fit.model.Q[0, 0] - 0.5) < abs(init.Q[0, 0] - 0.5)
        assert abs(fit.model.sigma2 - 1.0) < abs(init.sigma2 - 1.0)
