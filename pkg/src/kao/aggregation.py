"""Online expert aggregation driven by predictive risks.

Exponential-weight rules over a bank of filter experts.  Instead of the
realized squared loss, the updates consume the *predictive risk* of each
expert (``x'Px + sigma2``, exact for a well-specified filter) or the
centered linearized risk built from it:

    pseudo[m] = risk[m] - (y_agg - y_hat[m])^2
                - sum_m' rho[m'] * (risk[m'] - (y_agg - y_hat[m'])^2)

which satisfies sum_m rho[m] * pseudo[m] = 0 by construction.  None of
the rules in this module look at the realized observation; the three
baselines (:func:`baseline_update`) do, for comparison.

Weight rules
------------
* ``kao-ms``   risk-weighted selection: rho' ~ exp(-eta * risk) * rho
* ``kao-grad`` pseudo-loss gradient step: rho' ~ exp(-eta * pseudo) * rho
* ``kao-ml``   per-expert fixed rates with a second-order correction:
               rho' ~ exp(-eta * pseudo * (1 + eta * pseudo)) * rho
* ``kao-ada``  per-expert adaptive rates; weights recomputed from the
               accumulated surrogate each step (see :func:`kao_ada_update`)

Baselines
---------
* ``ewa``    exponentially weighted average on cumulative observed losses
  (Cesa-Bianchi & Lugosi, *Prediction, Learning, and Games*, 2006)
* ``boa``    the second-order adaptive machinery of ``kao-ada`` fed with
  centered observed loss gradients (Wintenberger, *Optimal learning with
  Bernstein online aggregation*, Machine Learning 2017)
* ``mlpoly`` polynomially weighted aggregation with per-expert adaptive
  rates: rho' ~ eta * max(cum_regret, 0) (Gaillard, Stoltz & van Erven,
  *A second-order bound with excess losses*, COLT 2014)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "RULES",
    "KAO_RULES",
    "BASELINE_RULES",
    "ExpertSnapshot",
    "WeightState",
    "init_weight_state",
    "pseudo_loss",
    "aggregate",
    "kao_ms_update",
    "kao_grad_update",
    "kao_ml_init",
    "kao_ml_update",
    "kao_ada_update",
    "baseline_update",
    "exp_concavity_probe",
    "ms_rate",
    "grad_rate",
    "ml_theorem_rates",
    "ml_selection_rate",
    "estimate_gradient_bound",
    "ms_regret_bound",
    "ada_regret_bound",
]

logger = logging.getLogger(__name__)

KAO_RULES = ("kao-ms", "kao-grad", "kao-ml", "kao-ada")
BASELINE_RULES = ("ewa", "boa", "mlpoly")
RULES = KAO_RULES + BASELINE_RULES

# Warn loudly only once per process when the second-order half-condition
# |eta * pseudo| < 1/2 is violated; later violations are logged at DEBUG.
_half_condition_warned = False


def _warn_half_condition(rule: str, worst: float) -> None:
    global _half_condition_warned
    msg = (
        f"{rule}: |eta * pseudo-loss| reached {worst:.3g} >= 0.5; "
        "the second-order surrogate is outside its guaranteed regime"
    )
    if _half_condition_warned:
        logger.debug(msg)
    else:
        logger.warning(msg)
        _half_condition_warned = True


def _as_vector(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float).reshape(-1)
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _check_simplex(rho: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    rho = _as_vector(rho, "rho")
    if abs(float(rho.sum()) - 1.0) > tol:
        raise ValueError(f"weights must sum to 1 within {tol}, got {rho.sum()!r}")
    if rho.min() < 0.0:
        raise ValueError(f"weights must be non-negative, got min {rho.min()!r}")
    return rho


def _normalized_exp(logw: np.ndarray) -> np.ndarray:
    """exp(logw) normalized to the simplex, max-shifted for stability."""
    w = np.exp(logw - logw.max())
    s = float(w.sum())
    if not math.isfinite(s) or s <= 0.0:
        raise RuntimeError("weight normalization failed (zero or non-finite mass)")
    return w / s


@dataclass(frozen=True)
class ExpertSnapshot:
    """Per-step expert outputs: predictions and predictive risks."""

    y_hat: np.ndarray
    risk: np.ndarray

    def __post_init__(self) -> None:
        y_hat = _as_vector(self.y_hat, "y_hat")
        risk = _as_vector(self.risk, "risk")
        if y_hat.shape != risk.shape:
            raise ValueError(
                f"y_hat and risk must have the same shape, got {y_hat.shape} vs {risk.shape}"
            )
        if risk.min() <= 0.0:
            raise ValueError(f"risks must be positive, got min {risk.min()!r}")
        object.__setattr__(self, "y_hat", y_hat)
        object.__setattr__(self, "risk", risk)

    @property
    def n_experts(self) -> int:
        return self.y_hat.shape[0]


@dataclass(frozen=True)
class WeightState:
    """State carried by every aggregation rule.

    ``cum_pseudo`` accumulates whatever per-expert signal drives the
    rule (risks for ``kao-ms``, pseudo-losses for the other KAO rules,
    observed losses/regrets for the baselines); ``cum_pseudo_sq`` and
    ``cum_surrogate`` are the second-order accumulators used by the
    adaptive rules; ``eta`` holds the current per-expert rates.
    """

    rule: str
    rho: np.ndarray
    rho_tilde0: np.ndarray
    cum_pseudo: np.ndarray
    cum_pseudo_sq: np.ndarray
    cum_surrogate: np.ndarray
    eta: np.ndarray

    @property
    def n_experts(self) -> int:
        return self.rho.shape[0]


def _fresh_state(rule: str, rho: np.ndarray, rho_tilde0: np.ndarray, eta: np.ndarray) -> WeightState:
    M = rho.shape[0]
    return WeightState(
        rule=rule,
        rho=rho,
        rho_tilde0=rho_tilde0,
        cum_pseudo=np.zeros(M),
        cum_pseudo_sq=np.zeros(M),
        cum_surrogate=np.zeros(M),
        eta=eta,
    )


def _validate_prior(prior, n_experts: int, name: str) -> np.ndarray:
    if prior is None:
        return np.full(n_experts, 1.0 / n_experts)
    prior = _as_vector(prior, name)
    if prior.shape[0] != n_experts:
        raise ValueError(f"{name} has {prior.shape[0]} entries for {n_experts} experts")
    if prior.min() <= 0.0:
        raise ValueError(f"{name} entries must be positive")
    if abs(float(prior.sum()) - 1.0) > 1e-9:
        raise ValueError(f"{name} must sum to 1 within 1e-9")
    return prior


def init_weight_state(
    rule: str,
    n_experts: int,
    rho0=None,
    rho_tilde0=None,
    etas=None,
) -> WeightState:
    """Build the initial :class:`WeightState` for a rule.

    ``kao-ml`` requires per-expert rates ``etas`` (see
    :func:`kao_ml_init`); ``kao-ada`` and ``boa`` derive their starting
    rates ``eta0 = sqrt(-log rho_tilde0)`` and weights proportional to
    ``eta0 * rho_tilde0``.  A single-expert bank short-circuits to the
    degenerate weight vector (1,) for every rule.
    """
    if rule not in RULES:
        raise ValueError(f"unknown rule {rule!r}; valid rules: {', '.join(RULES)}")
    if n_experts < 1:
        raise ValueError(f"n_experts must be >= 1, got {n_experts}")
    if n_experts == 1:
        one = np.ones(1)
        return _fresh_state(rule, one.copy(), one.copy(), np.zeros(1))
    if rule == "kao-ml":
        if etas is None:
            raise ValueError("kao-ml requires per-expert rates (etas)")
        return kao_ml_init(
            _validate_prior(rho_tilde0, n_experts, "rho_tilde0"),
            _as_vector(etas, "etas"),
        )
    if rule in ("kao-ada", "boa"):
        prior = _validate_prior(rho_tilde0, n_experts, "rho_tilde0")
        if prior.max() >= 1.0:
            raise ValueError("rho_tilde0 entries must lie in (0, 1)")
        eta0 = np.sqrt(-np.log(prior))
        rho = eta0 * prior
        rho = rho / rho.sum()
        return _fresh_state(rule, rho, prior, eta0)
    rho = _validate_prior(rho0, n_experts, "rho0")
    eta = np.zeros(n_experts)
    if etas is not None:
        eta = np.broadcast_to(np.asarray(etas, dtype=float), (n_experts,)).copy()
    return _fresh_state(rule, rho, rho.copy(), eta)


def pseudo_loss(snapshot: ExpertSnapshot, rho: np.ndarray) -> np.ndarray:
    """Centered linearized risks of the experts under weights ``rho``.

    Exactly centered: the weighted sum ``rho @ pseudo`` vanishes to
    machine precision (a second centering pass removes the rounding
    residue of the first).
    """
    rho = _check_simplex(rho)
    if rho.shape != snapshot.y_hat.shape:
        raise ValueError(
            f"rho has shape {rho.shape} for snapshot with {snapshot.n_experts} experts"
        )
    y_agg = float(rho @ snapshot.y_hat)
    raw = snapshot.risk - (y_agg - snapshot.y_hat) ** 2
    pl = raw - float(rho @ raw)
    pl = pl - float(rho @ pl)
    return pl


def aggregate(rho: np.ndarray, y_hat: np.ndarray) -> float:
    """Convex combination of expert predictions; lies in their hull."""
    rho = _check_simplex(rho)
    y_hat = _as_vector(y_hat, "y_hat")
    if rho.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: rho {rho.shape}, y_hat {y_hat.shape}")
    return float(rho @ y_hat)


def _with_log_rho(rho: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(rho)


def kao_ms_update(state: WeightState, snapshot: ExpertSnapshot, eta: float) -> WeightState:
    """Risk-weighted selection step: rho' ~ exp(-eta * risk) * rho.

    Consumes only the predictive risks — the update is measurable with
    respect to the information available *before* the observation.
    """
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    if snapshot.n_experts != state.n_experts:
        raise ValueError("snapshot size does not match the weight state")
    logw = _with_log_rho(state.rho) - eta * snapshot.risk
    return replace(
        state,
        rho=_normalized_exp(logw),
        cum_pseudo=state.cum_pseudo + snapshot.risk,
        eta=np.full(state.n_experts, float(eta)),
    )


def kao_grad_update(state: WeightState, pseudo: np.ndarray, eta: float) -> WeightState:
    """Gradient-style step on the centered pseudo-losses."""
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    pseudo = _as_vector(pseudo, "pseudo")
    if pseudo.shape[0] != state.n_experts:
        raise ValueError("pseudo-loss size does not match the weight state")
    logw = _with_log_rho(state.rho) - eta * pseudo
    return replace(
        state,
        rho=_normalized_exp(logw),
        cum_pseudo=state.cum_pseudo + pseudo,
        cum_pseudo_sq=state.cum_pseudo_sq + pseudo**2,
        eta=np.full(state.n_experts, float(eta)),
    )


def kao_ml_init(rho_tilde0: np.ndarray, etas: np.ndarray) -> WeightState:
    """Initial state for the multiple-rate rule.

    Starting weights are rho0 ~ eta^(m) * rho_tilde0^(m); the tilde
    weights recovered as (rho/eta) / sum(rho/eta) then reproduce
    rho_tilde0 exactly.
    """
    rho_tilde0 = _as_vector(rho_tilde0, "rho_tilde0")
    etas = _as_vector(etas, "etas")
    if rho_tilde0.shape != etas.shape:
        raise ValueError("rho_tilde0 and etas must have the same length")
    if rho_tilde0.min() <= 0.0 or rho_tilde0.max() >= 1.0:
        raise ValueError("rho_tilde0 entries must lie strictly inside (0, 1)")
    if abs(float(rho_tilde0.sum()) - 1.0) > 1e-9:
        raise ValueError("rho_tilde0 must sum to 1 within 1e-9")
    if etas.min() <= 0.0:
        raise ValueError("etas must be positive")
    rho = etas * rho_tilde0
    rho = rho / rho.sum()
    return _fresh_state("kao-ml", rho, rho_tilde0, etas.copy())


def kao_ml_update(state: WeightState, pseudo: np.ndarray) -> WeightState:
    """Second-order multiplicative step with fixed per-expert rates:

        rho' ~ exp(-eta * pseudo * (1 + eta * pseudo)) * rho

    The guarantee regime needs |eta * pseudo| < 1/2; violations are
    logged, not fatal.
    """
    pseudo = _as_vector(pseudo, "pseudo")
    if pseudo.shape[0] != state.n_experts:
        raise ValueError("pseudo-loss size does not match the weight state")
    scaled = state.eta * pseudo
    worst = float(np.max(np.abs(scaled)))
    if worst >= 0.5:
        _warn_half_condition("kao-ml", worst)
    logw = _with_log_rho(state.rho) - scaled * (1.0 + scaled)
    return replace(
        state,
        rho=_normalized_exp(logw),
        cum_pseudo=state.cum_pseudo + pseudo,
        cum_pseudo_sq=state.cum_pseudo_sq + pseudo**2,
        cum_surrogate=state.cum_surrogate + pseudo * (1.0 + scaled),
    )


def _second_order_adaptive(state: WeightState, values: np.ndarray) -> WeightState:
    """Shared adaptive core of ``kao-ada`` and the ``boa`` baseline.

    Accumulates the surrogate values * (1 + eta_prev * values) with the
    *previous* rates frozen inside the sum, then recomputes

        eta  = sqrt(-log rho_tilde0 / (1 + sum values^2))
        rho ~ eta * exp(-eta * cum_surrogate) * rho_tilde0
    """
    values = _as_vector(values, "values")
    if values.shape[0] != state.n_experts:
        raise ValueError("input size does not match the weight state")
    if state.n_experts == 1:
        return replace(
            state,
            cum_pseudo=state.cum_pseudo + values,
            cum_pseudo_sq=state.cum_pseudo_sq + values**2,
        )
    worst = float(np.max(np.abs(state.eta * values)))
    if worst >= 0.5:
        _warn_half_condition(state.rule, worst)
    cum_surrogate = state.cum_surrogate + values * (1.0 + state.eta * values)
    cum_sq = state.cum_pseudo_sq + values**2
    neg_log_prior = -np.log(state.rho_tilde0)
    eta = np.sqrt(neg_log_prior / (1.0 + cum_sq))
    logw = np.log(eta) - eta * cum_surrogate + np.log(state.rho_tilde0)
    return replace(
        state,
        rho=_normalized_exp(logw),
        cum_pseudo=state.cum_pseudo + values,
        cum_pseudo_sq=cum_sq,
        cum_surrogate=cum_surrogate,
        eta=eta,
    )


def kao_ada_update(state: WeightState, pseudo: np.ndarray) -> WeightState:
    """Adaptive multiple-rate step on the centered pseudo-losses.

    The per-expert rates are non-increasing in t, and the weights are
    recomputed from the accumulated surrogate at the current rate rather
    than updated multiplicatively.
    """
    return _second_order_adaptive(state, pseudo)


def baseline_update(state: WeightState, values: np.ndarray, eta: float | None = None) -> WeightState:
    """One step of an observation-driven baseline.

    ``values`` is the per-expert loss signal appropriate to the rule:

    * ``ewa``: observed losses (or their gradient-trick linearization);
      requires the scalar rate ``eta``.
    * ``boa``: centered observed loss gradients (weighted sum must be 0
      under the current weights, as for pseudo-losses).
    * ``mlpoly``: instantaneous regrets, aggregate loss minus expert
      loss, so positive entries favor the expert.
    """
    if state.rule == "ewa":
        if eta is None:
            raise ValueError("ewa requires an explicit learning rate")
        if eta <= 0:
            raise ValueError(f"eta must be positive, got {eta}")
        values = _as_vector(values, "values")
        if values.shape[0] != state.n_experts:
            raise ValueError("input size does not match the weight state")
        logw = _with_log_rho(state.rho) - eta * values
        return replace(
            state,
            rho=_normalized_exp(logw),
            cum_pseudo=state.cum_pseudo + values,
            eta=np.full(state.n_experts, float(eta)),
        )
    if state.rule == "boa":
        return _second_order_adaptive(state, values)
    if state.rule == "mlpoly":
        values = _as_vector(values, "values")
        if values.shape[0] != state.n_experts:
            raise ValueError("input size does not match the weight state")
        cum_regret = state.cum_pseudo + values
        cum_sq = state.cum_pseudo_sq + values**2
        eta_vec = 1.0 / (1.0 + cum_sq)
        w = eta_vec * np.clip(cum_regret, 0.0, None)
        s = float(w.sum())
        if s > 0.0:
            rho = w / s
        else:
            rho = np.full(state.n_experts, 1.0 / state.n_experts)
        return replace(
            state,
            rho=rho,
            cum_pseudo=cum_regret,
            cum_pseudo_sq=cum_sq,
            eta=eta_vec,
        )
    raise ValueError(f"{state.rule!r} is not a baseline rule")


# ---------------------------------------------------------------------------
# Exp-concavity probe and rate helpers
# ---------------------------------------------------------------------------

def exp_concavity_probe(y_grid, mu: float, sigma2: float, eta: float) -> float:
    """Worst second derivative of phi(y) = exp(-eta * ((y - mu)^2 + sigma2)).

    phi'' = -2 eta phi(y) (1 - 2 eta (y - mu)^2), so the map is concave
    on a grid with |y - mu| <= D exactly when eta <= 1 / (2 D^2).
    Returns max phi'' over the grid (<= 0 certifies concavity there).
    """
    y = _as_vector(y_grid, "y_grid")
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    if sigma2 <= 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    dev2 = (y - mu) ** 2
    phi = np.exp(-eta * (dev2 + sigma2))
    second = -2.0 * eta * phi * (1.0 - 2.0 * eta * dev2)
    return float(second.max())


def ms_rate(D: float) -> float:
    """Selection rate 1 / (2 D^2) for prediction deviations bounded by D."""
    if D <= 0:
        raise ValueError(f"D must be positive, got {D}")
    return 1.0 / (2.0 * D * D)


def grad_rate(G: float, n_experts: int, t: int) -> float:
    """Anytime gradient rate (1/G) * sqrt(2 log M / t)."""
    if G <= 0:
        raise ValueError(f"G must be positive, got {G}")
    if n_experts < 2:
        raise ValueError(f"need at least 2 experts, got {n_experts}")
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    return math.sqrt(2.0 * math.log(n_experts) / t) / G


def ml_theorem_rates(G: float, rho_tilde0, horizon: int) -> np.ndarray:
    """Per-expert rates (1/G) * min(sqrt(-log rho_tilde0 / T), 1/2)."""
    if G <= 0:
        raise ValueError(f"G must be positive, got {G}")
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    prior = _as_vector(rho_tilde0, "rho_tilde0")
    if prior.min() <= 0.0 or prior.max() >= 1.0:
        raise ValueError("rho_tilde0 entries must lie strictly inside (0, 1)")
    return np.minimum(np.sqrt(-np.log(prior) / horizon), 0.5) / G


def ml_selection_rate(G: float, D: float) -> float:
    """Constant selection rate 1 / (8 * max(2G, D^2)) for the multiple-rate rule."""
    if G <= 0 or D <= 0:
        raise ValueError(f"G and D must be positive, got G={G}, D={D}")
    return 1.0 / (8.0 * max(2.0 * G, D * D))


def estimate_gradient_bound(values, inflation: float = 1.5) -> float:
    """Burn-in estimate of the pseudo-loss bound G: inflation * max |values|.

    Floored at 1e-12 so downstream rate formulas stay finite on a
    degenerate (all-zero) burn-in window.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("cannot estimate a bound from an empty window")
    if not np.all(np.isfinite(values)):
        raise ValueError("values contain non-finite entries")
    if inflation <= 0:
        raise ValueError(f"inflation must be positive, got {inflation}")
    return max(float(inflation * np.max(np.abs(values))), 1e-12)


def ms_regret_bound(D: float, rho0_m: float) -> float:
    """Selection-regret budget -2 D^2 log rho0 for one expert's prior mass."""
    if D <= 0:
        raise ValueError(f"D must be positive, got {D}")
    if not 0.0 < rho0_m <= 1.0:
        raise ValueError(f"rho0_m must lie in (0, 1], got {rho0_m}")
    return -2.0 * D * D * math.log(rho0_m)


def ada_regret_bound(G_m: float, rho_tilde0_m: float, t: int) -> float:
    """Adaptive-rate aggregation-regret budget against one vertex:

        (G (3 + G) sqrt(t) + 1) * (sqrt(-log rho_tilde0) + r_t),
        r_t = loglog(e^{1/4} + G sqrt(t + 1)) / sqrt(-log rho_tilde0).
    """
    if G_m <= 0:
        raise ValueError(f"G_m must be positive, got {G_m}")
    if not 0.0 < rho_tilde0_m < 1.0:
        raise ValueError(f"rho_tilde0_m must lie in (0, 1), got {rho_tilde0_m}")
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    root_prior = math.sqrt(-math.log(rho_tilde0_m))
    r_t = math.log(math.log(math.exp(0.25) + G_m * math.sqrt(t + 1.0))) / root_prior
    return (G_m * (3.0 + G_m) * math.sqrt(t) + 1.0) * (root_prior + r_t)
