"""Model containers, simulation, closed-form moments, and CSV round-trips."""

import numpy as np
import pytest

from kao.models import (
    ObservationStream,
    StateSpaceModel,
    check_mean_variance_identity,
    load_stream_csv,
    minmax_normalize,
    predictive_moments,
    psd_sqrt,
    save_stream_csv,
    save_truth_csv,
    simulate_ssm,
)


def _rw_model(d: int = 1, sigma2: float = 1.0) -> StateSpaceModel:
    return StateSpaceModel(
        K=np.eye(d),
        Q=np.eye(d),
        sigma2=sigma2,
        theta0=np.zeros(d),
        P0=np.eye(d),
    )


class TestStateSpaceModel:
    def test_accepts_valid_model(self):
        m = _rw_model(3)
        assert m.dim == 3
        assert m.sigma2 == 1.0

    def test_rejects_nonsymmetric_q(self):
        with pytest.raises(ValueError, match="symmetric"):
            StateSpaceModel(
                K=np.eye(2),
                Q=np.array([[1.0, 0.5], [0.0, 1.0]]),
                sigma2=1.0,
                theta0=np.zeros(2),
                P0=np.eye(2),
            )

    def test_rejects_indefinite_p0(self):
        with pytest.raises(ValueError, match="eigenvalue"):
            StateSpaceModel(
                K=np.eye(1),
                Q=np.eye(1),
                sigma2=1.0,
                theta0=np.zeros(1),
                P0=-np.eye(1),
            )

    @pytest.mark.parametrize("sigma2", [0.0, -1.0, float("nan")])
    def test_rejects_bad_sigma2(self, sigma2):
        with pytest.raises(ValueError, match="sigma2"):
            _rw_model(1, sigma2=sigma2)

    def test_rejects_dimension_mismatch(self):
        with pytest.raises(ValueError, match="inconsistent dimensions"):
            StateSpaceModel(
                K=np.eye(2),
                Q=np.eye(2),
                sigma2=1.0,
                theta0=np.zeros(3),
                P0=np.eye(2),
            )

    def test_replace_revalidates(self):
        m = _rw_model(2)
        m2 = m.replace(sigma2=4.0)
        assert m2.sigma2 == 4.0 and m.sigma2 == 1.0
        with pytest.raises(ValueError):
            m.replace(sigma2=-1.0)


class TestPsdSqrt:
    def test_square_reproduces_matrix(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((4, 4))
        M = A @ A.T
        S = psd_sqrt(M)
        assert np.allclose(S @ S.T, M, atol=1e-10)

    def test_zero_matrix(self):
        assert np.array_equal(psd_sqrt(np.zeros((3, 3))), np.zeros((3, 3)))


class TestSimulate:
    def test_deterministic_for_fixed_seed(self):
        m = _rw_model(2)
        X = np.random.default_rng(1).uniform(size=(50, 2))
        s1 = simulate_ssm(m, X, seed=42)
        s2 = simulate_ssm(m, X, seed=42)
        assert np.array_equal(s1.y, s2.y)
        assert np.array_equal(s1.theta_path, s2.theta_path)
        s3 = simulate_ssm(m, X, seed=43)
        assert not np.array_equal(s1.y, s3.y)

    def test_carries_ground_truth(self):
        m = _rw_model(2)
        X = np.ones((10, 2)) * 0.5
        s = simulate_ssm(m, X, seed=0)
        assert s.mu is not None and s.theta_path is not None
        assert np.allclose(s.mu, np.einsum("td,td->t", X, s.theta_path))

    def test_rejects_wrong_design_width(self):
        with pytest.raises(ValueError, match="design"):
            simulate_ssm(_rw_model(2), np.ones((10, 3)), seed=0)


class TestPredictiveMoments:
    def test_random_walk_variance_grows_linearly(self):
        # d=1, K=1, Q=1, sigma2=1, x=1: theta_t sums t unit shocks, so
        # var(y_t) = t + 1 and E[y_t] = theta0 = 0.
        m = _rw_model(1)
        for t in (1, 3, 7):
            mean, var = predictive_moments(m, np.ones(1), t)
            assert mean == pytest.approx(0.0, abs=1e-14)
            assert var == pytest.approx(t + 1.0, abs=1e-12)

    def test_contracting_transition_geometric_sum(self):
        # K = 0.5: var(y_t) = sum_{k<t} 0.25^k * q + sigma2, mean decays as 0.5^t.
        m = StateSpaceModel(
            K=0.5 * np.eye(1), Q=np.eye(1), sigma2=2.0, theta0=np.ones(1), P0=np.eye(1)
        )
        t = 4
        mean, var = predictive_moments(m, np.ones(1), t)
        assert mean == pytest.approx(0.5**t)
        assert var == pytest.approx(sum(0.25**k for k in range(t)) + 2.0)

    def test_monte_carlo_agreement(self):
        m = _rw_model(2, sigma2=0.5)
        X = np.random.default_rng(3).uniform(size=(6, 2))
        mean_gap, var_gap = check_mean_variance_identity(m, X, t=5, n_mc=40_000, seed=9)
        # Standard error of the variance estimate at this n is ~0.04.
        assert mean_gap < 0.05
        assert var_gap < 0.25


class TestObservationStream:
    def test_rejects_ragged_and_empty(self):
        with pytest.raises(ValueError):
            ObservationStream(X=np.ones((3, 2)), y=np.ones(4))
        with pytest.raises(ValueError, match="empty"):
            ObservationStream(X=np.ones((0, 2)), y=np.ones(0))

    def test_rejects_nonfinite(self):
        y = np.ones(3)
        y[1] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            ObservationStream(X=np.ones((3, 2)), y=y)

    def test_name_count_must_match(self):
        with pytest.raises(ValueError, match="covariate names"):
            ObservationStream(X=np.ones((3, 2)), y=np.ones(3), names=("a",))


class TestMinmaxNormalize:
    def test_maps_to_unit_interval(self):
        X = np.random.default_rng(0).normal(5.0, 3.0, size=(40, 3))
        Z = minmax_normalize(X)
        assert Z.min() >= 0.0 and Z.max() <= 1.0
        assert np.allclose(Z.min(axis=0), 0.0)
        assert np.allclose(Z.max(axis=0), 1.0)

    def test_constant_column_maps_to_zero(self):
        X = np.column_stack([np.full(5, 7.0), np.arange(5.0)])
        Z = minmax_normalize(X)
        assert np.array_equal(Z[:, 0], np.zeros(5))
        assert Z[:, 1].max() == 1.0


class TestCsvRoundTrip:
    def test_stream_csv_is_lossless(self, tmp_path):
        m = _rw_model(2)
        X = np.random.default_rng(5).uniform(size=(30, 2))
        s = simulate_ssm(m, X, seed=11)
        s = ObservationStream(X=s.X, y=s.y, names=("a", "b"))
        path = tmp_path / "stream.csv"
        save_stream_csv(s, path)
        back = load_stream_csv(path)
        assert back.names == ("a", "b")
        assert np.array_equal(back.X, s.X)
        assert np.array_equal(back.y, s.y)

    def test_truth_sidecar_written(self, tmp_path):
        s = simulate_ssm(_rw_model(1), np.ones((5, 1)), seed=0)
        save_truth_csv(s, tmp_path / "truth.csv")
        text = (tmp_path / "truth.csv").read_text().splitlines()
        assert text[0].startswith("t,")
        assert len(text) == 6

    def test_load_with_normalization(self, tmp_path):
        s = ObservationStream(
            X=np.array([[2.0, 10.0], [4.0, 30.0], [3.0, 20.0]]),
            y=np.array([1.0, 2.0, 3.0]),
            names=("u", "v"),
        )
        save_stream_csv(s, tmp_path / "s.csv")
        back = load_stream_csv(tmp_path / "s.csv", normalize=True)
        assert back.X.min() == 0.0 and back.X.max() == 1.0
