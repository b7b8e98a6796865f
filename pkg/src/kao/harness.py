"""Experiment harness: expert banks, online runs, oracles, and metrics.

The harness wires the filter layer to the aggregation layer with a
strict information ordering at each step t:

1. every expert predicts from its current state (x_t is revealed);
2. the aggregate prediction is recorded with the current weights;
3. y_t is revealed: pseudo-losses/losses are computed, the weight rule
   updates, and every expert state advances.

Predictions at step t therefore depend on y_1..y_{t-1} only — permuting
future observations cannot change them.

The expensive part of a run — filtering every expert over the stream —
is independent of the aggregation rule, so it is exposed separately
(:func:`expert_forward`, :func:`refit_forward`) and shared when several
rules run on the same stream.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .aggregation import (
    RULES,
    ExpertSnapshot,
    WeightState,
    aggregate,
    baseline_update,
    grad_rate,
    init_weight_state,
    kao_ada_update,
    kao_grad_update,
    kao_ml_update,
    kao_ms_update,
    ml_theorem_rates,
    pseudo_loss,
)
from .kalman import em_fit, init_kalman_state, kalman_step, ridge_oracle
from .models import ObservationStream, StateSpaceModel
from .records import RunRecord

__all__ = [
    "BankTemplate",
    "ExpertBank",
    "build_subset_bank",
    "RuleParams",
    "ForwardPass",
    "expert_forward",
    "refit_forward",
    "burn_in_sigma2",
    "assemble_record",
    "run_online",
    "run_online_many",
    "sliding_window_refit",
    "estimate_sigma2",
    "project_simplex",
    "best_convex_weights",
    "best_convex_oracle",
    "MetricsReport",
    "metrics",
    "selection_regret_paths",
    "aggregation_regret_path",
    "forecaster_correction_design",
    "forecaster_correction_run",
    "ar1_residual_correction",
]

logger = logging.getLogger(__name__)

SIGMA2_FLOOR = 1e-8


# ---------------------------------------------------------------------------
# Expert banks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BankTemplate:
    """Per-dimension template the subset bank instantiates for each expert."""

    q_diag: float = 1.0
    q_offdiag: float = 0.9
    sigma2: float = 1.0
    theta0: float = 0.0
    p0_scale: float = 1.0


@dataclass(frozen=True)
class ExpertBank:
    """A bank of filter experts over a shared design row.

    ``feature_indices[m]`` selects the columns of each design row that
    expert m sees; its model dimension must match.
    """

    models: tuple[StateSpaceModel, ...]
    feature_indices: tuple[tuple[int, ...], ...]
    names: tuple[str, ...]

    def __post_init__(self) -> None:
        if not (len(self.models) == len(self.feature_indices) == len(self.names)):
            raise ValueError("models, feature_indices and names must have equal length")
        if len(self.models) == 0:
            raise ValueError("empty expert bank")
        object.__setattr__(
            self,
            "feature_indices",
            tuple(tuple(int(i) for i in idx) for idx in self.feature_indices),
        )
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        for m, (model, idx) in enumerate(zip(self.models, self.feature_indices)):
            if len(idx) != model.dim:
                raise ValueError(
                    f"expert {m}: {len(idx)} feature columns for model dimension {model.dim}"
                )

    @property
    def M(self) -> int:
        return len(self.models)

    @property
    def max_dim(self) -> int:
        return max(m.dim for m in self.models)

    def sigma2_vector(self) -> np.ndarray:
        return np.array([m.sigma2 for m in self.models])


def build_subset_bank(
    covariate_names: tuple[str, ...] | list[str],
    subsets: list[tuple[int, ...]] | list[list[int]] | tuple,
    template: BankTemplate,
) -> ExpertBank:
    """Instantiate one expert per covariate subset from a shared template.

    Each expert gets an identity transition, the template's equicorrelated
    state-noise covariance restricted to its dimension, and the template's
    sigma2 / initial state / initial covariance scale.
    """
    names = tuple(str(n) for n in covariate_names)
    if len(set(names)) != len(names):
        raise ValueError("duplicate covariate names")
    seen: set[frozenset[int]] = set()
    models = []
    indices = []
    labels = []
    for subset in subsets:
        idx = tuple(int(i) for i in subset)
        if len(idx) == 0:
            raise ValueError("empty covariate subset")
        if len(set(idx)) != len(idx):
            raise ValueError(f"subset {idx} repeats a covariate")
        if any(i < 0 or i >= len(names) for i in idx):
            raise ValueError(f"subset {idx} indexes outside the {len(names)} covariates")
        key = frozenset(idx)
        if key in seen:
            raise ValueError(f"duplicate subset {sorted(key)}")
        seen.add(key)
        d = len(idx)
        Q = np.full((d, d), template.q_offdiag) + (template.q_diag - template.q_offdiag) * np.eye(d)
        models.append(
            StateSpaceModel(
                K=np.eye(d),
                Q=Q,
                sigma2=template.sigma2,
                theta0=np.full(d, template.theta0),
                P0=template.p0_scale * np.eye(d),
            )
        )
        indices.append(idx)
        labels.append("+".join(names[i] for i in idx))
    return ExpertBank(models=tuple(models), feature_indices=tuple(indices), names=tuple(labels))


# ---------------------------------------------------------------------------
# Rule parameters and the aggregation replay
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RuleParams:
    """Everything needed to run one aggregation rule.

    ``rate_mode`` selects how learning rates are produced:

    * ``"fixed"``   — use ``eta`` (kao-ms, kao-grad, ewa) or explicit
      per-expert ``etas`` (kao-ml);
    * ``"anytime"`` — kao-grad only: eta_t = (1/G) sqrt(2 log M / t)
      with ``G = grad_bound`` and t counted from the aggregation start;
    * ``"theorem"`` — kao-ml only: per-expert rates
      (1/G) min(sqrt(-log rho_tilde0 / T), 1/2) over the aggregation
      horizon.

    kao-ada, boa and mlpoly are rate-free.  ``gradient_trick`` controls
    whether the baselines consume linearized observed losses.
    """

    rule: str
    eta: float | None = None
    etas: tuple[float, ...] | None = None
    grad_bound: float | None = None
    rho0: tuple[float, ...] | None = None
    rho_tilde0: tuple[float, ...] | None = None
    gradient_trick: bool = False
    rate_mode: str = "fixed"
    label: str | None = None

    def __post_init__(self) -> None:
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}; valid rules: {', '.join(RULES)}")
        if self.rate_mode not in ("fixed", "anytime", "theorem"):
            raise ValueError(f"unknown rate_mode {self.rate_mode!r}")
        if self.rate_mode == "anytime" and self.rule != "kao-grad":
            raise ValueError("rate_mode='anytime' applies to kao-grad only")
        if self.rate_mode == "theorem" and self.rule != "kao-ml":
            raise ValueError("rate_mode='theorem' applies to kao-ml only")
        for name in ("etas", "rho0", "rho_tilde0"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, tuple(float(v) for v in val))

    @property
    def run_label(self) -> str:
        return self.label or self.rule

    def validate_for(self, n_experts: int) -> None:
        if self.rule in ("kao-ms", "ewa") and self.eta is None:
            raise ValueError(f"{self.rule} requires a learning rate (eta)")
        if self.rule == "kao-grad":
            if self.rate_mode == "fixed" and self.eta is None:
                raise ValueError("kao-grad with rate_mode='fixed' requires eta")
            if self.rate_mode == "anytime" and self.grad_bound is None:
                raise ValueError("kao-grad with rate_mode='anytime' requires grad_bound")
        if self.rule == "kao-ml" and n_experts > 1:
            if self.rate_mode == "fixed" and self.etas is None:
                raise ValueError("kao-ml with rate_mode='fixed' requires per-expert etas")
            if self.rate_mode == "theorem" and self.grad_bound is None:
                raise ValueError("kao-ml with rate_mode='theorem' requires grad_bound")


def _init_rule_state(params: RuleParams, M: int, n_agg_steps: int) -> WeightState:
    if params.rule == "kao-ml" and M > 1 and params.rate_mode == "theorem":
        prior = (
            np.asarray(params.rho_tilde0, dtype=float)
            if params.rho_tilde0 is not None
            else np.full(M, 1.0 / M)
        )
        etas = tuple(ml_theorem_rates(params.grad_bound, prior, max(n_agg_steps, 1)))
        return init_weight_state("kao-ml", M, rho_tilde0=params.rho_tilde0, etas=etas)
    return init_weight_state(
        params.rule, M, rho0=params.rho0, rho_tilde0=params.rho_tilde0, etas=params.etas
    )


def _baseline_values(
    rule: str,
    gradient_trick: bool,
    y_hat_experts: np.ndarray,
    y_agg: float,
    y_obs: float,
    rho: np.ndarray,
) -> np.ndarray:
    """Per-expert loss signal consumed by a baseline at one step."""
    if rule == "ewa":
        if gradient_trick:
            return 2.0 * (y_agg - y_obs) * y_hat_experts
        return (y_hat_experts - y_obs) ** 2
    if rule == "boa":
        if gradient_trick:
            return 2.0 * (y_agg - y_obs) * (y_hat_experts - y_agg)
        losses = (y_hat_experts - y_obs) ** 2
        return losses - float(rho @ losses)
    if rule == "mlpoly":
        if gradient_trick:
            return 2.0 * (y_agg - y_obs) * (y_agg - y_hat_experts)
        return (y_agg - y_obs) ** 2 - (y_hat_experts - y_obs) ** 2
    raise ValueError(f"{rule!r} is not a baseline rule")


def _replay_rule(
    y_hat_experts: np.ndarray,
    risk: np.ndarray,
    y: np.ndarray,
    params: RuleParams,
    agg_start: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Run one weight rule over recorded expert snapshots.

    Returns ``(rho, y_agg, pseudo, eta)``; rows before ``agg_start``
    carry the initial weights and zero pseudo-losses.
    """
    T, M = y_hat_experts.shape
    params.validate_for(M)
    n_agg = T - agg_start + 1
    state = _init_rule_state(params, M, n_agg)
    rho_path = np.empty((T, M))
    eta_path = np.empty((T, M))
    pseudo_path = np.zeros((T, M))
    y_agg = np.empty(T)
    for t in range(T):
        rho_path[t] = state.rho
        y_agg[t] = aggregate(state.rho, y_hat_experts[t])
        step = t + 1
        if step < agg_start:
            eta_path[t] = state.eta
            continue
        snap = ExpertSnapshot(y_hat=y_hat_experts[t], risk=risk[t])
        pl = pseudo_loss(snap, state.rho)
        pseudo_path[t] = pl
        if params.rule == "kao-ms":
            state = kao_ms_update(state, snap, params.eta)
        elif params.rule == "kao-grad":
            if params.rate_mode == "anytime" and M > 1:
                eta_t = grad_rate(params.grad_bound, M, step - agg_start + 1)
            else:
                eta_t = params.eta if params.eta is not None else 1.0
            state = kao_grad_update(state, pl, eta_t)
        elif params.rule == "kao-ml":
            state = kao_ml_update(state, pl)
        elif params.rule == "kao-ada":
            state = kao_ada_update(state, pl)
        else:
            values = _baseline_values(
                params.rule, params.gradient_trick, y_hat_experts[t], y_agg[t], y[t], state.rho
            )
            state = baseline_update(state, values, eta=params.eta)
        eta_path[t] = state.eta
    return rho_path, y_agg, pseudo_path, eta_path


# ---------------------------------------------------------------------------
# Forward passes (rule-independent filtering)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ForwardPass:
    """Pure filter outputs, independent of any aggregation rule."""

    y_hat: np.ndarray  # (T, M) one-step predictions
    quad: np.ndarray   # (T, M) x'Px terms (risk minus the sigma2 offset)


def expert_forward(
    bank: ExpertBank,
    stream: ObservationStream,
    models: list[StateSpaceModel] | tuple[StateSpaceModel, ...] | None = None,
) -> ForwardPass:
    """Run every expert's recursion over the stream once."""
    mods = list(models) if models is not None else list(bank.models)
    if len(mods) != bank.M:
        raise ValueError(f"{len(mods)} models for a bank of {bank.M}")
    T = stream.T
    y_hat = np.empty((T, bank.M))
    quad = np.empty((T, bank.M))
    for m, (model, idx) in enumerate(zip(mods, bank.feature_indices)):
        if max(idx) >= stream.n_features:
            raise ValueError(
                f"expert {m} selects column {max(idx)} of a {stream.n_features}-wide stream"
            )
        cols = np.asarray(idx, dtype=int)
        state = init_kalman_state(model)
        for t in range(T):
            state = kalman_step(model, state, stream.X[t, cols], stream.y[t])
            y_hat[t, m] = state.last_pred
            quad[t, m] = state.last_risk - model.sigma2
    return ForwardPass(y_hat=y_hat, quad=quad)


def refit_forward(
    bank: ExpertBank,
    stream: ObservationStream,
    window: int,
    *,
    em_iters: int = 8,
    em_tol: float = 1e-4,
    update_theta0: bool = True,
    retrofit_first_window: bool = False,
) -> tuple[ForwardPass, np.ndarray, tuple[StateSpaceModel, ...]]:
    """Forward pass with per-window EM re-estimation of Q and sigma2.

    At every boundary t = p * window (p >= 1, t < T) each expert's
    parameters are re-fit on y_1..y_t and its filter re-run from scratch
    under the new parameters, so the next window is predicted by the
    model fitted on all preceding data.  An EM failure on one expert is
    logged and its previous parameters are retained.

    The first fit initializes the observation variance at the window's
    static-ridge residual variance instead of the bank's nominal value.
    The bank value is an arbitrary unit; starting EM orders of magnitude
    below the data's residual scale pushes badly misspecified experts
    into a regime where the state noise inflates to absorb the misfit,
    and the resulting filter both predicts poorly and reports a risk far
    below its realized error.  A scale-matched start keeps the fit — and
    hence the risk each expert feeds the aggregation — honest.  Later
    boundaries warm-start from the previous fit.

    With ``retrofit_first_window`` the first window's rows are replaced
    by the re-filtered outputs of the models fitted at the first
    boundary, turning that window into an in-sample training segment.
    Predictions from the second window on are unaffected and remain
    strictly one-step-ahead; use this when evaluation starts after the
    first boundary and the aggregation weights need an in-sample
    stretch to move off their uniform initialisation.

    Returns the forward pass, the per-step per-expert sigma2 in force
    (T, M), and the final fitted models.
    """
    if window < 2 * bank.max_dim:
        raise ValueError(
            f"window must be at least twice the largest expert dimension "
            f"({2 * bank.max_dim}), got {window}"
        )
    T = stream.T
    M = bank.M
    models = list(bank.models)
    states = [init_kalman_state(m) for m in models]
    cols = [np.asarray(idx, dtype=int) for idx in bank.feature_indices]
    for idx in bank.feature_indices:
        if max(idx) >= stream.n_features:
            raise ValueError(
                f"bank selects column {max(idx)} of a {stream.n_features}-wide stream"
            )
    y_hat = np.empty((T, M))
    quad = np.empty((T, M))
    sigma2_path = np.empty((T, M))
    for t in range(T):
        for m in range(M):
            states[m] = kalman_step(models[m], states[m], stream.X[t, cols[m]], stream.y[t])
            y_hat[t, m] = states[m].last_pred
            quad[t, m] = states[m].last_risk - models[m].sigma2
            sigma2_path[t, m] = models[m].sigma2
        boundary = t + 1
        if boundary % window == 0 and boundary < T:
            for m in range(M):
                Xm = stream.X[:boundary, cols[m]]
                ym = stream.y[:boundary]
                init_model = models[m]
                if boundary == window:
                    theta_r = ridge_oracle(1.0, init_model.theta0, Xm, ym)
                    s2 = max(float(np.mean((ym - Xm @ theta_r) ** 2)), SIGMA2_FLOOR)
                    init_model = init_model.replace(sigma2=s2)
                try:
                    fit = em_fit(
                        Xm,
                        ym,
                        init=init_model,
                        n_iter=em_iters,
                        tol=em_tol,
                        update_theta0=update_theta0,
                    )
                except (RuntimeError, np.linalg.LinAlgError) as exc:
                    logger.warning(
                        "EM refit failed for expert %d at t=%d (%s); keeping previous parameters",
                        m,
                        boundary,
                        exc,
                    )
                    continue
                models[m] = fit.model
                retrofit = retrofit_first_window and boundary == window
                state = init_kalman_state(fit.model)
                for s in range(boundary):
                    state = kalman_step(fit.model, state, Xm[s], ym[s])
                    if retrofit:
                        y_hat[s, m] = state.last_pred
                        quad[s, m] = state.last_risk - fit.model.sigma2
                states[m] = state
                if retrofit:
                    sigma2_path[:boundary, m] = fit.model.sigma2
    return ForwardPass(y_hat=y_hat, quad=quad), sigma2_path, tuple(models)


def _sigma2_from_residuals(y: np.ndarray, y_hat: np.ndarray, burn_in: int) -> float:
    resid = y[:burn_in] - y_hat[:burn_in]
    est = float(np.mean(resid**2))
    if est < SIGMA2_FLOOR:
        logger.warning(
            "degenerate burn-in variance estimate %.3e floored at %.0e", est, SIGMA2_FLOOR
        )
        return SIGMA2_FLOOR
    return est


def burn_in_sigma2(stream: ObservationStream, forward: ForwardPass, burn_in: int) -> np.ndarray:
    """Per-expert frozen burn-in estimates of the observation variance."""
    if not 1 <= burn_in < stream.T:
        raise ValueError(f"burn_in must lie in [1, {stream.T - 1}], got {burn_in}")
    return np.array(
        [
            _sigma2_from_residuals(stream.y, forward.y_hat[:, m], burn_in)
            for m in range(forward.y_hat.shape[1])
        ]
    )


def assemble_record(
    stream: ObservationStream,
    expert_names: tuple[str, ...],
    forward: ForwardPass,
    risk: np.ndarray,
    sigma2_hat: np.ndarray,
    params: RuleParams,
    *,
    agg_start: int = 1,
    eval_start: int = 1,
    seed: int | None = None,
    config_hash: str | None = None,
    sigma2_true: float | None = None,
    extras: dict | None = None,
) -> RunRecord:
    """Replay one rule over a precomputed forward pass and package the run."""
    rho, y_agg, pseudo, eta = _replay_rule(forward.y_hat, risk, stream.y, params, agg_start)
    record_extras = dict(extras or {})
    if params.label is not None:
        record_extras.setdefault("label", params.label)
    return RunRecord(
        rule=params.rule,
        y=stream.y,
        y_hat=y_agg,
        y_hat_experts=forward.y_hat,
        risk=risk,
        rho=rho,
        pseudo=pseudo,
        eta=eta,
        sigma2_hat=sigma2_hat,
        expert_names=expert_names,
        eval_start=min(eval_start, stream.T),
        agg_start=agg_start,
        seed=seed,
        config_hash=config_hash,
        mu=stream.mu,
        sigma2_true=sigma2_true,
        extras=record_extras,
    )


# ---------------------------------------------------------------------------
# Online runs
# ---------------------------------------------------------------------------

def run_online_many(
    bank: ExpertBank,
    stream: ObservationStream,
    params_list: list[RuleParams] | tuple[RuleParams, ...],
    *,
    burn_in: int = 0,
    sigma2_mode: str = "model",
    agg_start: int | None = None,
    eval_start: int = 1,
    seed: int | None = None,
    config_hash: str | None = None,
    sigma2_true: float | None = None,
) -> dict[str, RunRecord]:
    """Run several aggregation rules over one shared expert forward pass.

    Returns ``{run_label: record}``.  See :func:`run_online` for the
    sigma2 conventions.
    """
    if len(params_list) == 0:
        raise ValueError("no rules to run")
    labels = [p.run_label for p in params_list]
    if len(set(labels)) != len(labels):
        raise ValueError(f"duplicate rule labels: {labels}")
    if sigma2_mode not in ("model", "burn-in"):
        raise ValueError(f"unknown sigma2_mode {sigma2_mode!r}")
    T = stream.T
    if sigma2_mode == "burn-in" and agg_start is None:
        agg_start = burn_in + 1
    if agg_start is None:
        agg_start = 1
    if not 1 <= agg_start <= T:
        raise ValueError(f"agg_start must lie in [1, {T}], got {agg_start}")

    forward = expert_forward(bank, stream)
    if sigma2_mode == "model":
        sigma2_hat = bank.sigma2_vector()
    else:
        sigma2_hat = burn_in_sigma2(stream, forward, burn_in)
    risk = forward.quad + sigma2_hat[None, :]
    return {
        p.run_label: assemble_record(
            stream,
            bank.names,
            forward,
            risk,
            sigma2_hat,
            p,
            agg_start=agg_start,
            eval_start=eval_start,
            seed=seed,
            config_hash=config_hash,
            sigma2_true=sigma2_true,
        )
        for p in params_list
    }


def run_online(
    bank: ExpertBank,
    stream: ObservationStream,
    params: RuleParams,
    *,
    burn_in: int = 0,
    sigma2_mode: str = "model",
    agg_start: int | None = None,
    eval_start: int = 1,
    seed: int | None = None,
    config_hash: str | None = None,
    sigma2_true: float | None = None,
) -> RunRecord:
    """Run the bank and one aggregation rule over a stream.

    ``sigma2_mode="model"`` takes each expert's risk offset from its
    model; ``"burn-in"`` estimates it as the mean squared residual over
    the first ``burn_in`` steps (frozen afterwards), in which case
    weight updates start at ``burn_in + 1`` by default so that no
    prediction uses information from its own future.
    """
    records = run_online_many(
        bank,
        stream,
        [params],
        burn_in=burn_in,
        sigma2_mode=sigma2_mode,
        agg_start=agg_start,
        eval_start=eval_start,
        seed=seed,
        config_hash=config_hash,
        sigma2_true=sigma2_true,
    )
    return records[params.run_label]


def sliding_window_refit(
    bank: ExpertBank,
    stream: ObservationStream,
    window: int,
    refit: str,
    params: RuleParams,
    *,
    em_iters: int = 8,
    em_tol: float = 1e-4,
    update_theta0: bool = True,
    retrofit_first_window: bool = False,
    eval_start: int | None = None,
    agg_start: int | None = None,
    seed: int | None = None,
    config_hash: str | None = None,
    sigma2_true: float | None = None,
) -> RunRecord:
    """Online run with optional per-window re-estimation of Q and sigma2.

    With ``refit="em"`` the forward pass is :func:`refit_forward`; with
    ``refit="none"`` this reduces to :func:`run_online` (same
    bookkeeping, no re-estimation).  Aggregation and evaluation both
    default to starting after the first window.  With
    ``retrofit_first_window`` the first window becomes an in-sample
    training segment (see :func:`refit_forward`) and aggregation
    defaults to starting at step 1 so the weights enter the evaluation
    range already adapted.
    """
    if refit not in ("none", "em"):
        raise ValueError(f"unknown refit mode {refit!r}")
    if window < 2 * bank.max_dim:
        raise ValueError(
            f"window must be at least twice the largest expert dimension "
            f"({2 * bank.max_dim}), got {window}"
        )
    if retrofit_first_window and refit != "em":
        raise ValueError("retrofit_first_window requires refit='em'")
    T = stream.T
    if eval_start is None:
        eval_start = min(window + 1, T)
    if agg_start is None:
        agg_start = 1 if retrofit_first_window else min(window + 1, T)
    if refit == "none":
        return run_online(
            bank,
            stream,
            params,
            agg_start=agg_start,
            eval_start=eval_start,
            seed=seed,
            config_hash=config_hash,
            sigma2_true=sigma2_true,
        )
    forward, sigma2_path, models = refit_forward(
        bank,
        stream,
        window,
        em_iters=em_iters,
        em_tol=em_tol,
        update_theta0=update_theta0,
        retrofit_first_window=retrofit_first_window,
    )
    risk = forward.quad + sigma2_path
    sigma2_hat = np.array([m.sigma2 for m in models])
    return assemble_record(
        stream,
        bank.names,
        forward,
        risk,
        sigma2_hat,
        params,
        agg_start=agg_start,
        eval_start=eval_start,
        seed=seed,
        config_hash=config_hash,
        sigma2_true=sigma2_true,
    )


def estimate_sigma2(record: RunRecord, expert: int, burn_in: int) -> float:
    """Frozen burn-in estimate of one expert's observation variance.

    Mean squared one-step residual over the first ``burn_in`` steps,
    floored at 1e-8 (a warning is logged when the floor binds).
    """
    if not 0 <= expert < record.n_experts:
        raise ValueError(f"expert index {expert} outside [0, {record.n_experts})")
    if not 1 <= burn_in <= record.T:
        raise ValueError(f"burn_in must lie in [1, {record.T}], got {burn_in}")
    return _sigma2_from_residuals(record.y, record.y_hat_experts[:, expert], burn_in)


# ---------------------------------------------------------------------------
# Offline convex oracle
# ---------------------------------------------------------------------------

def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=float).reshape(-1)
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    ks = np.arange(1, v.shape[0] + 1)
    mask = u - (css - 1.0) / ks > 0.0
    k = int(np.nonzero(mask)[0].max()) + 1
    tau = (css[k - 1] - 1.0) / k
    return np.clip(v - tau, 0.0, None)


def best_convex_weights(
    y_hat_experts: np.ndarray,
    y: np.ndarray,
    n_restarts: int = 20,
    tol: float = 1e-9,
    max_iter: int = 20_000,
    seed: int = 0,
) -> tuple[np.ndarray, float]:
    """Fixed convex combination minimizing the mean squared error.

    Accelerated projected gradient descent (with monotone restarts) run
    to first-order stationarity ``tol`` of the projected-gradient map.
    Starts: the best single expert, the uniform mix, and
    ``n_restarts - 2`` random simplex points.  Monotone descent from the
    best-vertex start guarantees the returned mse never exceeds any
    single expert's mse.

    The objective is quadratic in the weights, so predictions enter
    only through the M-by-M second-moment matrix of per-expert
    residuals (for weights summing to one, the combined residual is the
    same convex combination of the expert residuals); every gradient
    step costs O(M^2) regardless of the horizon, and the step size
    comes from that matrix's exact largest eigenvalue.  After the
    descent, the weights on the identified support are refined by
    solving the equality-constrained optimality system directly and
    the first-order conditions are re-verified, so ill-conditioned
    instances (experts on wildly different error scales) still land on
    the optimum instead of crawling toward it.  Returns ``(pi, mse)``;
    the optimal mse is unique even when the optimal weights are not
    (e.g. duplicated experts).
    """
    A = np.asarray(y_hat_experts, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if A.ndim != 2 or A.shape[0] != y.shape[0]:
        raise ValueError(f"inconsistent shapes: predictions {A.shape}, y {y.shape}")
    T, M = A.shape
    if M == 1:
        r = A[:, 0] - y
        return np.ones(1), float(r @ r) / T
    E = A - y[:, None]
    G = (E.T @ E) / T
    G = 0.5 * (G + G.T)
    lip = 2.0 * float(np.linalg.eigvalsh(G)[-1])
    if lip <= 0.0:
        return np.full(M, 1.0 / M), 0.0

    def fval(p: np.ndarray) -> float:
        return float(p @ G @ p)

    def grad(p: np.ndarray) -> np.ndarray:
        return 2.0 * (G @ p)

    rng = np.random.default_rng(seed)
    vertex = np.zeros(M)
    vertex[int(np.argmin(np.diag(G)))] = 1.0
    starts = [vertex, np.full(M, 1.0 / M)]
    starts += [rng.dirichlet(np.ones(M)) for _ in range(max(n_restarts - 2, 0))]
    best_pi, best_f = starts[0], fval(starts[0])
    for x0 in starts:
        x = x0
        x_prev = x0
        fx = fval(x)
        tk = 1.0
        for _ in range(max_iter):
            tk_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * tk * tk))
            beta = (tk - 1.0) / tk_next
            v = x + beta * (x - x_prev)
            x_new = project_simplex(v - grad(v) / lip)
            f_new = fval(x_new)
            if f_new > fx:
                x_new = project_simplex(x - grad(x) / lip)
                f_new = fval(x_new)
                tk_next = 1.0
            x_prev, x, fx, tk = x, x_new, f_new, tk_next
            residual = float(np.max(np.abs(x - project_simplex(x - grad(x) / lip))))
            if residual <= tol:
                break
        if fx < best_f:
            best_f, best_pi = fx, x
        refined, f_ref, certified = _active_set_refine(G, x, fx, tol)
        if f_ref <= best_f:
            best_pi, best_f = refined, f_ref
        if certified:
            # First-order conditions hold globally for this convex
            # problem; further restarts cannot improve the value.
            break
    return best_pi, best_f


def _active_set_refine(
    G: np.ndarray, pi: np.ndarray, f: float, tol: float
) -> tuple[np.ndarray, float, bool]:
    """Solve min p'Gp over the simplex exactly on a descent-identified support.

    Standard active-set refinement: solve the equality-constrained
    optimality system on the current support, drop coordinates the
    solution drives negative, add the most violating excluded
    coordinate, and stop when the first-order conditions hold (support
    gradients equal, excluded gradients no smaller).  Returns
    ``(pi, f, certified)`` where ``certified`` marks a verified
    first-order point; the refined point is only kept if it does not
    increase the objective, so the caller's monotone-descent guarantees
    survive verbatim.
    """
    M = G.shape[0]
    support = np.flatnonzero(pi > 1e-12)
    if support.size == 0:
        support = np.array([int(np.argmin(np.diag(G)))])
    best_pi, best_f = pi, f
    for _ in range(4 * M):
        k = support.size
        kkt = np.zeros((k + 1, k + 1))
        kkt[:k, :k] = 2.0 * G[np.ix_(support, support)]
        kkt[:k, k] = 1.0
        kkt[k, :k] = 1.0
        rhs = np.zeros(k + 1)
        rhs[k] = 1.0
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        p_s = sol[:k]
        if np.min(p_s) < -1e-12:
            drop = support[int(np.argmin(p_s))]
            support = support[support != drop]
            if support.size == 0:
                break
            continue
        cand = np.zeros(M)
        cand[support] = np.clip(p_s, 0.0, None)
        total = cand.sum()
        if total <= 0.0 or not np.all(np.isfinite(cand)):
            break
        cand /= total
        g = 2.0 * (G @ cand)
        lam = float(g[support] @ cand[support])
        off = np.setdiff1d(np.arange(M), support, assume_unique=True)
        f_cand = float(cand @ G @ cand)
        if f_cand <= best_f:
            best_pi, best_f = cand, f_cand
        if off.size == 0 or float(np.min(g[off])) >= lam - tol * max(1.0, abs(lam)):
            return best_pi, best_f, True
        support = np.sort(np.append(support, off[int(np.argmin(g[off]))]))
    return best_pi, best_f, False


def best_convex_oracle(record: RunRecord, **kwargs) -> tuple[np.ndarray, float]:
    """Best fixed convex combination over the record's evaluation range."""
    sl = record.eval_slice
    return best_convex_weights(record.y_hat_experts[sl], record.y[sl], **kwargs)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _exact_risks(record: RunRecord, predictions: np.ndarray) -> np.ndarray:
    """Exact conditional risks (pred - mu)^2 + sigma2_true on the eval range."""
    if record.mu is None or record.sigma2_true is None:
        raise ValueError("record carries no simulation ground truth")
    sl = record.eval_slice
    mu = record.mu[sl]
    preds = predictions[sl]
    if preds.ndim == 1:
        return (preds - mu) ** 2 + record.sigma2_true
    return (preds - mu[:, None]) ** 2 + record.sigma2_true


def selection_regret_paths(record: RunRecord) -> np.ndarray:
    """Cumulative exact-risk regret of the aggregate against each expert.

    Returns an array of shape (T_eval, M): prefix sums over the eval
    range of L(y_hat) - L(y_hat_m), with L the exact conditional risk
    computed from the simulation truth.
    """
    agg = np.cumsum(_exact_risks(record, record.y_hat))
    experts = np.cumsum(_exact_risks(record, record.y_hat_experts), axis=0)
    return agg[:, None] - experts


def aggregation_regret_path(record: RunRecord, pi: np.ndarray) -> np.ndarray:
    """Cumulative exact-risk regret against a fixed convex combination."""
    pi = np.asarray(pi, dtype=float).reshape(-1)
    if pi.shape[0] != record.n_experts:
        raise ValueError(f"pi has {pi.shape[0]} entries for {record.n_experts} experts")
    mix = record.y_hat_experts @ pi
    agg = np.cumsum(_exact_risks(record, record.y_hat))
    mixed = np.cumsum(_exact_risks(record, mix))
    return agg - mixed


@dataclass(frozen=True)
class MetricsReport:
    """Evaluation-range summary of one run."""

    rule: str
    eval_start: int
    n_eval: int
    mse: float
    rmse: float
    mse_experts: np.ndarray
    best_expert: int
    mse_best_expert: float
    best_convex_pi: np.ndarray
    best_convex_mse: float
    relative_rmse: float
    cum_sq_error: np.ndarray
    regret_selection: np.ndarray | None = None
    regret_aggregation: float | None = None

    def to_dict(self) -> dict:
        return {
            "rule": self.rule,
            "eval_start": self.eval_start,
            "n_eval": self.n_eval,
            "mse": self.mse,
            "rmse": self.rmse,
            "mse_experts": [float(v) for v in self.mse_experts],
            "best_expert": self.best_expert,
            "mse_best_expert": self.mse_best_expert,
            "best_convex_pi": [float(v) for v in self.best_convex_pi],
            "best_convex_mse": self.best_convex_mse,
            "relative_rmse": self.relative_rmse if math.isfinite(self.relative_rmse) else None,
            "regret_selection": None
            if self.regret_selection is None
            else [float(v) for v in self.regret_selection],
            "regret_aggregation": self.regret_aggregation,
        }


def metrics(
    record: RunRecord,
    oracle_kwargs: dict | None = None,
    oracle: tuple[np.ndarray, float] | None = None,
) -> MetricsReport:
    """Aggregate and per-expert errors, the convex oracle, and regrets.

    All quantities are computed on the evaluation range.  When the
    record carries simulation truth, exact-risk regrets are included:
    the final selection regret against every expert and the aggregation
    regret against the oracle's weights.  ``oracle`` accepts a
    precomputed ``(pi, mse)`` pair so runs sharing one forward pass do
    not re-solve the same convex problem.
    """
    sl = record.eval_slice
    y = record.y[sl]
    n_eval = y.shape[0]
    err = record.y_hat[sl] - y
    mse = float(err @ err) / n_eval
    expert_err = record.y_hat_experts[sl] - y[:, None]
    mse_experts = np.mean(expert_err**2, axis=0)
    best_expert = int(np.argmin(mse_experts))
    if oracle is not None:
        pi, bc_mse = np.asarray(oracle[0], dtype=float), float(oracle[1])
    else:
        pi, bc_mse = best_convex_oracle(record, **(oracle_kwargs or {}))
    rmse = math.sqrt(mse)
    relative = rmse / math.sqrt(bc_mse) if bc_mse > 0 else math.inf
    regret_sel = None
    regret_agg = None
    if record.mu is not None and record.sigma2_true is not None:
        regret_sel = selection_regret_paths(record)[-1]
        regret_agg = float(aggregation_regret_path(record, pi)[-1])
    return MetricsReport(
        rule=record.rule,
        eval_start=record.eval_start,
        n_eval=n_eval,
        mse=mse,
        rmse=rmse,
        mse_experts=mse_experts,
        best_expert=best_expert,
        mse_best_expert=float(mse_experts[best_expert]),
        best_convex_pi=pi,
        best_convex_mse=bc_mse,
        relative_rmse=relative,
        cum_sq_error=np.cumsum(err**2),
        regret_selection=regret_sel,
        regret_aggregation=regret_agg,
    )


# ---------------------------------------------------------------------------
# Forecaster-correction pipeline
# ---------------------------------------------------------------------------

def forecaster_correction_design(
    y: np.ndarray, forecasts: np.ndarray
) -> tuple[np.ndarray, list[str]]:
    """Stacked design for correcting external forecasters.

    Expert m sees the row (1, f_{m,t}, y_{t-1} - f_{m,t-1}): an
    intercept, its forecast, and its own lagged residual (zero at t=1
    by convention).  Returns the (T, 3M) design and per-column names.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    F = np.asarray(forecasts, dtype=float)
    if F.ndim != 2 or F.shape[0] != y.shape[0]:
        raise ValueError(f"forecasts must have shape (T, M); got {F.shape} for T={y.shape[0]}")
    T, M = F.shape
    X = np.zeros((T, 3 * M))
    names = []
    for m in range(M):
        X[:, 3 * m] = 1.0
        X[:, 3 * m + 1] = F[:, m]
        X[1:, 3 * m + 2] = y[:-1] - F[:-1, m]
        names += [f"f{m}_const", f"f{m}_forecast", f"f{m}_lag_resid"]
    return X, names


def forecaster_correction_run(
    y: np.ndarray,
    forecasts: np.ndarray,
    params: RuleParams,
    *,
    split_fraction: float = 0.5,
    em_iters: int = 30,
    em_tol: float = 1e-6,
    init_q_scale: float = 0.01,
    seed: int | None = None,
) -> tuple[RunRecord, ExpertBank]:
    """Train-then-aggregate pipeline over external forecasters.

    Each forecaster becomes a 3-dimensional correction expert
    (intercept, forecast, lagged residual) whose Q and sigma2 are fit by
    EM on the first ``split_fraction`` of the data (theta0 updated too);
    the aggregation rule then runs over the remaining steps.  Returns
    the evaluation-range record and the fitted bank.
    """
    if not 0.0 < split_fraction < 1.0:
        raise ValueError(f"split_fraction must lie in (0, 1), got {split_fraction}")
    y = np.asarray(y, dtype=float).reshape(-1)
    F = np.asarray(forecasts, dtype=float)
    X, _ = forecaster_correction_design(y, F)
    T, M = F.shape
    split = int(T * split_fraction)
    if split < 4 or T - split < 2:
        raise ValueError(f"split at {split} of {T} leaves too little data on one side")

    models = []
    indices = []
    for m in range(M):
        cols = tuple(range(3 * m, 3 * m + 3))
        init = StateSpaceModel(
            K=np.eye(3),
            Q=init_q_scale * np.eye(3),
            sigma2=max(float(np.var(y[:split] - F[:split, m])), SIGMA2_FLOOR),
            theta0=np.array([0.0, 1.0, 0.0]),
            P0=np.eye(3),
        )
        try:
            fit = em_fit(
                X[:split, list(cols)],
                y[:split],
                init=init,
                n_iter=em_iters,
                tol=em_tol,
                update_theta0=True,
            )
            models.append(fit.model)
        except (RuntimeError, np.linalg.LinAlgError) as exc:
            logger.warning(
                "EM failed for forecaster %d (%s); keeping the initial parameters", m, exc
            )
            models.append(init)
        indices.append(cols)
    bank = ExpertBank(
        models=tuple(models),
        feature_indices=tuple(indices),
        names=tuple(f"forecaster_{m}" for m in range(M)),
    )
    eval_stream = ObservationStream(X=X[split:], y=y[split:])
    record = run_online(bank, eval_stream, params, seed=seed)
    return record, bank


def ar1_residual_correction(
    y: np.ndarray, forecasts: np.ndarray, split_fraction: float = 0.5
) -> tuple[np.ndarray, np.ndarray]:
    """One-step AR(1) correction of forecaster residuals.

    Fits phi_m by least squares on r_t = phi r_{t-1} over the training
    split of each forecaster's residuals r = y - f, then returns the
    corrected forecasts f_t + phi r_{t-1} on the evaluation split,
    together with the fitted coefficients.
    """
    if not 0.0 < split_fraction < 1.0:
        raise ValueError(f"split_fraction must lie in (0, 1), got {split_fraction}")
    y = np.asarray(y, dtype=float).reshape(-1)
    F = np.asarray(forecasts, dtype=float)
    if F.ndim != 2 or F.shape[0] != y.shape[0]:
        raise ValueError(f"forecasts must have shape (T, M); got {F.shape}")
    T, M = F.shape
    split = int(T * split_fraction)
    if split < 3 or T - split < 1:
        raise ValueError(f"split at {split} of {T} leaves too little data on one side")
    resid = y[:, None] - F
    phis = np.empty(M)
    for m in range(M):
        prev = resid[: split - 1, m]
        curr = resid[1:split, m]
        denom = float(prev @ prev)
        phis[m] = float(prev @ curr) / denom if denom > 0 else 0.0
    corrected = F[split:] + phis[None, :] * resid[split - 1 : -1]
    return corrected, phis
