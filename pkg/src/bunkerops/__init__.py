"""bunkerops: simulate, train, and evaluate container-emptying schedulers.

A facility of n stochastically filling containers shares one processing
unit. The package provides the discrete-time simulator, a curriculum-trained
actor-critic scheduler, an offline-trained pairwise collision classifier
with an inference-time override, and the seeded evaluation harness with CSV
and figure reports.
"""

__version__ = "0.1.0"

from .env import (
    ContainerSpec,
    FacilityConfig,
    FacilityState,
    StepOutcome,
    default_facility,
    derive_rng,
    fill_step,
    busy_time,
    is_collision_state,
    load_facility,
    observation,
    reset,
    save_facility,
    step,
)
from .rewards import Phase, RewardParams, compute_reward, reward_params_for_phase
from .ppo import (
    CurriculumSchedule,
    PPOConfig,
    PolicyParams,
    Trajectory,
    act,
    gae,
    load_policy,
    ppo_update,
    save_policy,
    train_curriculum,
    train_naive,
)
from .pairsim import (
    PairRolloutConfig,
    extract_features,
    generate_dataset,
    load_dataset,
    pair_features,
    sample_pair_params,
    simulate_pair,
)
from .gbdt import (
    BoostedEnsemble,
    CMTrainConfig,
    DecisionTree,
    evaluate_cm,
    load_cm,
    save_cm,
    train_cm,
)
from .override import OverrideConfig, RiskAssessment, decide, pairwise_risk, risk_score
from .harness import (
    AggregateReport,
    EpisodeMetrics,
    MissingArtifactError,
    cv_pct,
    evaluate_method,
    run_episode,
    threshold_sweep,
)
