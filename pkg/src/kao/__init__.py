"""Online aggregation of Kalman-filter experts.

A bank of state-space forecasters runs side by side; exponential-weight
rules combine their one-step predictions using each filter's own risk
estimate, so the aggregate never needs held-out data to tune itself.
The package bundles the filter layer (with exact small-problem oracles,
a smoother, and EM parameter estimation), the weight rules and their
baselines, an experiment harness with offline convex oracles and regret
accounting, and a CLI for simulation, runs, and figure export.
"""

from .aggregation import (
    BASELINE_RULES,
    KAO_RULES,
    RULES,
    ExpertSnapshot,
    WeightState,
    aggregate,
    baseline_update,
    estimate_gradient_bound,
    exp_concavity_probe,
    init_weight_state,
    kao_ada_update,
    kao_grad_update,
    kao_ml_update,
    kao_ms_update,
    pseudo_loss,
)
from .config import (
    BankSpec,
    ExperimentConfig,
    ModelSpec,
    ProtocolSpec,
    RuleSpec,
    Theta0Spec,
    load_config,
    save_config,
)
from .harness import (
    BankTemplate,
    ExpertBank,
    MetricsReport,
    RuleParams,
    best_convex_weights,
    build_subset_bank,
    expert_forward,
    forecaster_correction_run,
    metrics,
    run_online,
    run_online_many,
    sliding_window_refit,
)
from .kalman import (
    EMFit,
    KalmanState,
    SmoothedPath,
    em_fit,
    exact_filter_oracle,
    exact_smoother_oracle,
    init_kalman_state,
    kalman_predict,
    kalman_step,
    ridge_oracle,
    rts_smooth,
)
from .models import (
    ObservationStream,
    StateSpaceModel,
    load_stream_csv,
    predictive_moments,
    save_stream_csv,
    simulate_ssm,
)
from .presets import (
    make_bank,
    make_stream,
    replication_batch_config,
    run_experiment,
    run_replications,
    static_regret_setup,
    synthetic_study_config,
)
from .records import RunRecord, load_run, save_run

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # models
    "StateSpaceModel",
    "ObservationStream",
    "simulate_ssm",
    "predictive_moments",
    "load_stream_csv",
    "save_stream_csv",
    # filtering
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
    # aggregation
    "KAO_RULES",
    "BASELINE_RULES",
    "RULES",
    "ExpertSnapshot",
    "WeightState",
    "init_weight_state",
    "pseudo_loss",
    "aggregate",
    "kao_ms_update",
    "kao_grad_update",
    "kao_ml_update",
    "kao_ada_update",
    "baseline_update",
    "exp_concavity_probe",
    "estimate_gradient_bound",
    # harness
    "BankTemplate",
    "ExpertBank",
    "build_subset_bank",
    "RuleParams",
    "expert_forward",
    "run_online",
    "run_online_many",
    "sliding_window_refit",
    "best_convex_weights",
    "MetricsReport",
    "metrics",
    "forecaster_correction_run",
    # records
    "RunRecord",
    "save_run",
    "load_run",
    # config + presets
    "Theta0Spec",
    "ModelSpec",
    "BankSpec",
    "RuleSpec",
    "ProtocolSpec",
    "ExperimentConfig",
    "load_config",
    "save_config",
    "make_stream",
    "make_bank",
    "run_experiment",
    "run_replications",
    "synthetic_study_config",
    "replication_batch_config",
    "static_regret_setup",
]
