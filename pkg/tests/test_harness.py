"""Expert banks, online replay, convex oracle, metrics, correction pipeline."""

import logging
import math

import numpy as np
import pytest

from kao.harness import (
    SIGMA2_FLOOR,
    BankTemplate,
    ExpertBank,
    RuleParams,
    ar1_residual_correction,
    aggregation_regret_path,
    best_convex_oracle,
    best_convex_weights,
    build_subset_bank,
    burn_in_sigma2,
    estimate_sigma2,
    expert_forward,
    forecaster_correction_design,
    forecaster_correction_run,
    metrics,
    project_simplex,
    run_online,
    run_online_many,
    selection_regret_paths,
    sliding_window_refit,
)
from kao.models import ObservationStream, StateSpaceModel, simulate_ssm
from kao.presets import static_regret_setup


def small_bank_and_stream(seed=3, T=120):
    """Three-covariate stream; experts on {0}, {1}, {0,1} with truth on {0,1}."""
    names = ("a", "b", "c")
    bank = build_subset_bank(names, [(0,), (1,), (0, 1)], BankTemplate(sigma2=1.0))
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(T, 3))
    truth = StateSpaceModel(
        K=np.eye(2),
        Q=0.05 * np.eye(2),
        sigma2=1.0,
        theta0=np.array([2.0, -1.0]),
        P0=np.eye(2),
    )
    inner = simulate_ssm(truth, X[:, :2], seed=seed + 1)
    stream = ObservationStream(
        X=X, y=inner.y, names=names, theta_path=inner.theta_path, mu=inner.mu
    )
    return bank, stream


class TestBankConstruction:
    def test_subset_bank_shapes_and_labels(self):
        bank = build_subset_bank(
            ("u", "v", "w"),
            [(0,), (1, 2), (0, 2)],
            BankTemplate(q_diag=2.0, q_offdiag=0.5, sigma2=1.5, theta0=3.0, p0_scale=4.0),
        )
        assert bank.M == 3 and bank.max_dim == 2
        assert bank.names == ("u", "v+w", "u+w")
        m = bank.models[1]
        assert np.allclose(m.Q, [[2.0, 0.5], [0.5, 2.0]])
        assert m.sigma2 == 1.5
        assert np.allclose(m.theta0, [3.0, 3.0])
        assert np.allclose(m.P0, 4.0 * np.eye(2))
        assert np.allclose(bank.sigma2_vector(), [1.5, 1.5, 1.5])

    def test_subset_validation(self):
        tpl = BankTemplate()
        with pytest.raises(ValueError, match="duplicate covariate names"):
            build_subset_bank(("x", "x"), [(0,)], tpl)
        with pytest.raises(ValueError, match="empty covariate subset"):
            build_subset_bank(("x",), [()], tpl)
        with pytest.raises(ValueError, match="repeats"):
            build_subset_bank(("x", "y"), [(0, 0)], tpl)
        with pytest.raises(ValueError, match="outside"):
            build_subset_bank(("x",), [(1,)], tpl)
        with pytest.raises(ValueError, match="duplicate subset"):
            build_subset_bank(("x", "y"), [(0, 1), (1, 0)], tpl)

    def test_bank_dimension_mismatch(self):
        model = StateSpaceModel(
            K=np.eye(2), Q=np.eye(2), sigma2=1.0, theta0=np.zeros(2), P0=np.eye(2)
        )
        with pytest.raises(ValueError, match="feature columns"):
            ExpertBank(models=(model,), feature_indices=((0,),), names=("m",))


class TestRuleParams:
    def test_rule_and_mode_validation(self):
        with pytest.raises(ValueError, match="unknown rule"):
            RuleParams(rule="nope")
        with pytest.raises(ValueError, match="anytime"):
            RuleParams(rule="kao-ms", rate_mode="anytime")
        with pytest.raises(ValueError, match="theorem"):
            RuleParams(rule="boa", rate_mode="theorem")

    def test_validate_for_missing_rates(self):
        with pytest.raises(ValueError, match="learning rate"):
            RuleParams(rule="kao-ms").validate_for(3)
        with pytest.raises(ValueError, match="requires eta"):
            RuleParams(rule="kao-grad").validate_for(3)
        with pytest.raises(ValueError, match="grad_bound"):
            RuleParams(rule="kao-grad", rate_mode="anytime").validate_for(3)
        with pytest.raises(ValueError, match="etas"):
            RuleParams(rule="kao-ml").validate_for(3)
        # Rate-free rules need nothing.
        RuleParams(rule="kao-ada").validate_for(3)
        RuleParams(rule="boa").validate_for(3)
        RuleParams(rule="mlpoly").validate_for(3)

    def test_run_label_defaults_to_rule(self):
        assert RuleParams(rule="boa").run_label == "boa"
        assert RuleParams(rule="boa", label="boa-gt").run_label == "boa-gt"


class TestOnlineReplay:
    def test_weights_frozen_before_agg_start(self):
        bank, stream = small_bank_and_stream()
        params = RuleParams(rule="kao-ms", eta=0.05)
        rec = run_online(bank, stream, params, agg_start=40)
        uniform = np.full(bank.M, 1.0 / bank.M)
        assert np.allclose(rec.rho[:40], uniform[None, :], atol=0)
        assert not np.allclose(rec.rho[45], uniform)

    def test_rows_stay_on_simplex_and_in_hull(self):
        bank, stream = small_bank_and_stream()
        recs = run_online_many(
            bank,
            stream,
            [
                RuleParams(rule="kao-ms", eta=0.1),
                RuleParams(rule="kao-grad", eta=0.01),
                RuleParams(rule="kao-ada"),
                RuleParams(rule="boa", gradient_trick=True),
                RuleParams(rule="mlpoly"),
            ],
        )
        for rec in recs.values():
            assert np.abs(rec.rho.sum(axis=1) - 1.0).max() <= 1e-12
            assert rec.rho.min() >= 0.0
            lo = rec.y_hat_experts.min(axis=1) - 1e-9
            hi = rec.y_hat_experts.max(axis=1) + 1e-9
            assert np.all((rec.y_hat >= lo) & (rec.y_hat <= hi))

    def test_pseudo_losses_centered_under_current_weights(self):
        bank, stream = small_bank_and_stream()
        rec = run_online(bank, stream, RuleParams(rule="kao-grad", eta=0.02))
        inner = np.einsum("tm,tm->t", rec.rho, rec.pseudo)
        scale = np.maximum(1.0, np.abs(rec.pseudo).max(axis=1))
        assert np.abs(inner / scale).max() <= 1e-12

    def test_duplicate_labels_rejected(self):
        bank, stream = small_bank_and_stream()
        with pytest.raises(ValueError, match="duplicate rule labels"):
            run_online_many(
                bank,
                stream,
                [RuleParams(rule="boa"), RuleParams(rule="boa")],
            )

    def test_forward_pass_shared_across_rules(self):
        bank, stream = small_bank_and_stream()
        recs = run_online_many(
            bank,
            stream,
            [RuleParams(rule="kao-ms", eta=0.1), RuleParams(rule="boa")],
        )
        a, b = recs["kao-ms"], recs["boa"]
        assert np.array_equal(a.y_hat_experts, b.y_hat_experts)
        assert np.array_equal(a.risk, b.risk)

    def test_burn_in_mode_defaults_and_estimates(self):
        bank, stream = small_bank_and_stream()
        rec = run_online(
            bank,
            stream,
            RuleParams(rule="kao-ms", eta=0.1),
            burn_in=30,
            sigma2_mode="burn-in",
        )
        assert rec.agg_start == 31
        forward = expert_forward(bank, stream)
        manual = np.mean((stream.y[:30, None] - forward.y_hat[:30]) ** 2, axis=0)
        assert np.allclose(rec.sigma2_hat, manual, atol=1e-14)
        # Risks are the quadratic term plus the frozen estimate.
        assert np.allclose(
            rec.risk, (forward.y_hat * 0 + forward.quad) + manual[None, :], atol=1e-12
        )

    def test_unknown_sigma2_mode(self):
        bank, stream = small_bank_and_stream()
        with pytest.raises(ValueError, match="sigma2_mode"):
            run_online(bank, stream, RuleParams(rule="boa"), sigma2_mode="oracle")

    def test_anytime_rate_decreases(self):
        bank, stream = small_bank_and_stream()
        rec = run_online(
            bank,
            stream,
            RuleParams(rule="kao-grad", rate_mode="anytime", grad_bound=5.0),
            agg_start=10,
        )
        etas = rec.eta[9:, 0]  # agg_start is 1-indexed; first update is row 9
        assert np.all(np.diff(etas) <= 1e-15)
        assert etas[0] == pytest.approx(math.sqrt(2 * math.log(3) / 1) / 5.0)
        assert etas[1] == pytest.approx(math.sqrt(2 * math.log(3) / 2) / 5.0)


class TestBurnInEstimates:
    def test_floor_binds_on_perfect_predictions(self, caplog):
        # A zero-noise static expert that starts at the truth predicts
        # exactly, so the residual variance estimate hits the floor.
        d = 2
        theta = np.array([1.0, -2.0])
        X = np.random.default_rng(0).uniform(size=(50, d))
        stream = ObservationStream(X=X, y=X @ theta)
        model = StateSpaceModel(
            K=np.eye(d), Q=np.zeros((d, d)), sigma2=1.0, theta0=theta, P0=np.zeros((d, d))
        )
        bank = ExpertBank(models=(model,), feature_indices=((0, 1),), names=("exact",))
        forward = expert_forward(bank, stream)
        with caplog.at_level(logging.WARNING, logger="kao.harness"):
            est = burn_in_sigma2(stream, forward, burn_in=20)
        assert est[0] == SIGMA2_FLOOR
        assert any("floored" in r.getMessage() for r in caplog.records)

    def test_estimate_sigma2_matches_record(self):
        bank, stream = small_bank_and_stream()
        rec = run_online(bank, stream, RuleParams(rule="boa"))
        manual = float(np.mean((stream.y[:25] - rec.y_hat_experts[:25, 1]) ** 2))
        assert estimate_sigma2(rec, 1, 25) == pytest.approx(manual, rel=1e-12)
        with pytest.raises(ValueError, match="expert index"):
            estimate_sigma2(rec, 9, 25)
        with pytest.raises(ValueError, match="burn_in"):
            estimate_sigma2(rec, 0, 0)


class TestSlidingWindowRefit:
    def test_none_mode_equals_plain_run(self):
        bank, stream = small_bank_and_stream()
        params = RuleParams(rule="kao-ms", eta=0.1)
        a = sliding_window_refit(bank, stream, 40, "none", params)
        b = run_online(bank, stream, params, agg_start=41, eval_start=41)
        assert np.array_equal(a.y_hat, b.y_hat)
        assert np.array_equal(a.rho, b.rho)
        assert a.eval_start == b.eval_start == 41

    def test_em_mode_changes_risks_and_stays_finite(self):
        bank, stream = small_bank_and_stream()
        params = RuleParams(rule="kao-ms", eta=0.1)
        plain = sliding_window_refit(bank, stream, 40, "none", params)
        refit = sliding_window_refit(bank, stream, 40, "em", params, em_iters=3)
        assert np.isfinite(refit.y_hat).all() and np.isfinite(refit.risk).all()
        assert refit.risk.min() > 0
        assert not np.array_equal(plain.risk, refit.risk)

    def test_retrofit_pulls_aggregation_start_forward(self):
        bank, stream = small_bank_and_stream()
        params = RuleParams(rule="kao-ms", eta=0.1)
        rec = sliding_window_refit(
            bank, stream, 40, "em", params, em_iters=3, retrofit_first_window=True
        )
        assert rec.agg_start == 1 and rec.eval_start == 41

    def test_validation(self):
        bank, stream = small_bank_and_stream()
        params = RuleParams(rule="boa")
        with pytest.raises(ValueError, match="unknown refit mode"):
            sliding_window_refit(bank, stream, 40, "mle", params)
        with pytest.raises(ValueError, match="window"):
            sliding_window_refit(bank, stream, 3, "em", params)
        with pytest.raises(ValueError, match="retrofit_first_window"):
            sliding_window_refit(
                bank, stream, 40, "none", params, retrofit_first_window=True
            )


class TestProjectSimplex:
    def test_known_points(self):
        assert np.allclose(project_simplex(np.array([2.0, 0.0])), [1.0, 0.0])
        assert np.allclose(project_simplex(np.array([0.3, 0.3])), [0.5, 0.5])
        assert np.allclose(
            project_simplex(np.array([0.5, -1.0, 0.5])), [0.5, 0.0, 0.5]
        )

    def test_fixed_point_on_simplex(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            p = rng.dirichlet(np.ones(int(rng.integers(2, 8))))
            assert np.allclose(project_simplex(p), p, atol=1e-12)

    def test_projection_is_closest_simplex_point(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            M = int(rng.integers(2, 7))
            v = rng.standard_normal(M) * 3
            p = project_simplex(v)
            assert abs(p.sum() - 1.0) <= 1e-12 and p.min() >= 0
            for _ in range(40):
                q = rng.dirichlet(np.ones(M))
                assert np.sum((v - p) ** 2) <= np.sum((v - q) ** 2) + 1e-12


class TestBestConvexWeights:
    def test_beats_dense_barycentric_grid(self):
        rng = np.random.default_rng(7)
        Y = rng.standard_normal((50, 3))
        y = rng.standard_normal(50)
        pi, f = best_convex_weights(Y, y)
        best_grid = math.inf
        for i in range(101):
            for j in range(101 - i):
                w = np.array([i, j, 100 - i - j], dtype=float) / 100.0
                best_grid = min(best_grid, float(np.mean((Y @ w - y) ** 2)))
        assert f <= best_grid + 1e-12
        assert best_grid - f <= 1e-4

    def test_first_order_conditions(self):
        rng = np.random.default_rng(8)
        Y = rng.standard_normal((200, 5)) + rng.standard_normal((1, 5))
        y = Y @ rng.dirichlet(np.ones(5)) + 0.1 * rng.standard_normal(200)
        pi, f = best_convex_weights(Y, y)
        grad = 2.0 * Y.T @ (Y @ pi - y) / Y.shape[0]
        support = pi > 1e-9
        lam = grad[support].mean()
        assert np.abs(grad[support] - lam).max() <= 1e-6
        assert np.all(grad[~support] >= lam - 1e-6)

    def test_dominates_every_vertex(self):
        rng = np.random.default_rng(9)
        Y = rng.standard_normal((80, 4))
        y = rng.standard_normal(80)
        _, f = best_convex_weights(Y, y)
        vertex_mse = np.mean((Y - y[:, None]) ** 2, axis=0)
        assert f <= vertex_mse.min() + 1e-12

    def test_duplicate_columns_singular_gram(self):
        rng = np.random.default_rng(10)
        col = rng.standard_normal(60)
        Y = np.column_stack([col, col, rng.standard_normal(60)])
        y = rng.standard_normal(60)
        pi, f = best_convex_weights(Y, y)
        assert abs(pi.sum() - 1.0) <= 1e-9 and pi.min() >= -1e-12
        assert np.isfinite(f)

    def test_single_expert(self):
        rng = np.random.default_rng(11)
        Y = rng.standard_normal((30, 1))
        y = rng.standard_normal(30)
        pi, f = best_convex_weights(Y, y)
        assert np.allclose(pi, [1.0])
        assert f == pytest.approx(float(np.mean((Y[:, 0] - y) ** 2)))

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(12)
        Y = rng.standard_normal((100, 6))
        y = rng.standard_normal(100)
        pi1, f1 = best_convex_weights(Y, y, seed=4)
        pi2, f2 = best_convex_weights(Y, y, seed=4)
        assert np.array_equal(pi1, pi2) and f1 == f2

    def test_recovers_interior_mixture(self):
        # Noiseless target strictly inside the hull: the oracle must
        # reproduce it to optimizer precision.
        rng = np.random.default_rng(13)
        Y = rng.standard_normal((120, 3))
        w_true = np.array([0.2, 0.5, 0.3])
        y = Y @ w_true
        pi, f = best_convex_weights(Y, y)
        assert f <= 1e-12
        assert np.abs(pi - w_true).max() <= 1e-5


class TestMetrics:
    def test_report_consistency(self):
        bank, stream = small_bank_and_stream()
        rec = run_online(
            bank,
            stream,
            RuleParams(rule="kao-ms", eta=0.1),
            eval_start=30,
            sigma2_true=1.0,
        )
        rep = metrics(rec)
        sl = rec.eval_slice
        assert rep.n_eval == stream.T - 29
        assert rep.mse == pytest.approx(float(np.mean((rec.y_hat[sl] - rec.y[sl]) ** 2)))
        assert rep.rmse == pytest.approx(math.sqrt(rep.mse))
        assert rep.mse_best_expert == rep.mse_experts.min()
        assert rep.mse >= rep.best_convex_mse - 1e-9
        assert rep.relative_rmse == pytest.approx(rep.rmse / math.sqrt(rep.best_convex_mse))
        assert rep.cum_sq_error.shape == (rep.n_eval,)
        # Ground truth present: regrets computed.
        assert rep.regret_selection is not None and rep.regret_selection.shape == (bank.M,)
        assert rep.regret_aggregation is not None
        d = rep.to_dict()
        assert d["rule"] == "kao-ms" and len(d["mse_experts"]) == bank.M

    def test_oracle_passthrough(self):
        bank, stream = small_bank_and_stream()
        rec = run_online(bank, stream, RuleParams(rule="boa"))
        oracle = best_convex_oracle(rec)
        rep = metrics(rec, oracle=oracle)
        assert np.array_equal(rep.best_convex_pi, oracle[0])
        assert rep.best_convex_mse == oracle[1]

    def test_regret_paths_shapes_and_final_values(self):
        bank, stream = small_bank_and_stream()
        rec = run_online(
            bank, stream, RuleParams(rule="kao-ada"), eval_start=20, sigma2_true=1.0
        )
        paths = selection_regret_paths(rec)
        assert paths.shape == (stream.T - 19, bank.M)
        rep = metrics(rec)
        assert np.allclose(paths[-1], rep.regret_selection)
        agg_path = aggregation_regret_path(rec, rep.best_convex_pi)
        assert agg_path.shape == (stream.T - 19,)
        assert rep.regret_aggregation == pytest.approx(float(agg_path[-1]))

    def test_regret_requires_ground_truth(self):
        rng = np.random.default_rng(14)
        X = rng.uniform(size=(40, 3))
        stream = ObservationStream(X=X, y=rng.standard_normal(40))
        bank = build_subset_bank(("a", "b", "c"), [(0, 1)], BankTemplate())
        rec = run_online(bank, stream, RuleParams(rule="boa"))
        with pytest.raises(ValueError, match="ground truth"):
            selection_regret_paths(rec)
        rep = metrics(rec)
        assert rep.regret_selection is None and rep.regret_aggregation is None


class TestStaticRegretSetup:
    def test_deterministic_and_truth_in_bank(self):
        bank1, stream1 = static_regret_setup(seed=7, T=50)
        bank2, stream2 = static_regret_setup(seed=7, T=50)
        assert np.array_equal(stream1.y, stream2.y)
        assert np.array_equal(bank1.models[0].theta0, bank2.models[0].theta0)
        # Expert 0 starts at the generating coefficients; the stream's
        # state path is constant at them.
        assert np.allclose(stream1.theta_path, stream1.theta_path[0][None, :])
        assert np.allclose(bank1.models[0].theta0, stream1.theta_path[0])
        for m in bank1.models:
            assert np.all(m.Q == 0) and np.all(m.K == np.eye(3)) and m.sigma2 == 1.0

    def test_validation(self):
        with pytest.raises(ValueError, match="n_experts"):
            static_regret_setup(seed=0, n_experts=1)
        with pytest.raises(ValueError, match="lam"):
            static_regret_setup(seed=0, lam=0.0)


class TestForecasterCorrection:
    def test_design_layout(self):
        y = np.arange(1.0, 7.0)
        F = np.column_stack([y + 1.0, y - 2.0])
        X, names = forecaster_correction_design(y, F)
        assert X.shape == (6, 6) and len(names) == 6
        # Block m: intercept, forecast, lagged residual (0 at t=0).
        assert np.all(X[:, 0] == 1.0) and np.all(X[:, 3] == 1.0)
        assert np.array_equal(X[:, 1], F[:, 0])
        assert X[0, 2] == 0.0
        assert np.allclose(X[1:, 2], (y - F[:, 0])[:-1])

    def test_ar1_correction_recovers_exact_autoregression(self):
        rng = np.random.default_rng(15)
        T, phi = 40, 0.6
        y = rng.standard_normal(T).cumsum() + 10
        r = np.empty(T)
        r[0] = 1.0
        for t in range(1, T):
            r[t] = phi * r[t - 1]
        F = (y - r)[:, None]
        corrected, phis = ar1_residual_correction(y, F)
        assert phis[0] == pytest.approx(phi, rel=1e-12)
        split = T // 2
        assert np.allclose(corrected[:, 0], y[split:], atol=1e-10)

    def test_pipeline_runs_and_improves_biased_forecasters(self):
        rng = np.random.default_rng(16)
        T = 120
        mu = np.sin(np.arange(T) / 5.0) * 3 + 20
        y = mu + 0.3 * rng.standard_normal(T)
        F = np.column_stack([mu + 2.0, mu - 3.0])  # constant biases
        record, bank = forecaster_correction_run(
            y, F, RuleParams(rule="kao-ada"), em_iters=10, seed=0
        )
        assert bank.M == 2
        rep = metrics(record)
        raw_mse = float(np.mean((F[T // 2 :] - y[T // 2 :, None]) ** 2, axis=0).min())
        assert rep.mse < raw_mse

    def test_split_validation(self):
        y = np.arange(10.0)
        F = np.zeros((10, 1))
        with pytest.raises(ValueError, match="split_fraction"):
            ar1_residual_correction(y, F, split_fraction=1.0)
        with pytest.raises(ValueError, match="too little data"):
            forecaster_correction_run(
                y, F, RuleParams(rule="boa"), split_fraction=0.2
            )
