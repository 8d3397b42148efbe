"""Digital-twin toolkit for a multi-device random-access network.

The package simulates the physical system (env), learns a Bayesian model of
its unknown dynamics from logged experience (model), optimizes decentralized
transmission policies with a counterfactual multi-agent gradient on
model-generated rollouts (coma, nets), monitors live windows for anomalies
through an epistemic disagreement test (monitor), and orchestrates the
experiments (harness, cli).
"""

from .config import (
    Config,
    ConfigError,
    DynamicsTables,
    ExperimentConfig,
    LearningConfig,
    MonitoringConfig,
    SystemConfig,
    TrainConfig,
    default_config_path,
    load_config,
    load_default_config,
    save_config,
)
from .env import (
    DeviceObservation,
    JointAction,
    StepOutcome,
    SystemState,
    Trajectory,
    TransitionRecord,
    buffer_update,
    initial_state,
    mpr_distribution,
    read_trajectory,
    reward,
    sample_delivery,
    sample_generation,
    step_ground_truth,
    transition_probability,
    write_trajectory,
)
from .model import (
    DirichletTable,
    MapUndefinedError,
    ModelSample,
    PosteriorModel,
    init_prior,
    load_posterior,
    map_estimate,
    model_step,
    model_transition_probability,
    posterior_mean,
    sample_model,
    save_posterior,
    update_posterior,
)
from .coma import (
    RolloutBatch,
    TrainingDiverged,
    TrainResult,
    counterfactual_advantage,
    critic_targets,
    generate_virtual_rollouts,
    train,
)
from .monitor import (
    AnomalyScore,
    cluster_log_likelihood,
    disagreement_score,
    frequentist_score,
    log_likelihood,
    roc_curve,
)
from .nets import Actor, Adam, Critic, FeatureCodec, GradientError, MLP, load_policy, save_policy
from .harness import (
    AlwaysIdlePolicy,
    AlwaysTransmitPolicy,
    ExplorationPolicy,
    MetricsRow,
    PPersistentPolicy,
    collect_learning_data,
    derive_rng,
    evaluate_policy,
    experiment_anomaly_roc,
    experiment_policy_sweep,
    run_cycle,
    simulate_trajectory,
)

__version__ = "0.1.0"
