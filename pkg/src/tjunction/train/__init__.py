from .config import (
    DEFAULT_STAGE_STEPS,
    EvalParams,
    PreferenceAnchors,
    RunConfig,
    STAGES,
    TrainParams,
    TrajPretrainParams,
    config_hash,
)
from .ppo import (
    ConsecutiveBadUpdates,
    UpdateResult,
    categorical_kl,
    compute_gae,
    guide_targets,
    normalize_advantages,
    ppo_loss,
    ppo_update,
    reg_loss,
)
from .rollout import (
    EpisodeResult,
    NetBundle,
    RolloutBatch,
    RolloutCollector,
    StagePlan,
    anchor_choice,
    plan_for_stage,
)
from .stages import (
    MissingPrerequisite,
    load_ego_net,
    load_social_net,
    load_trajae,
    pretrain_trajae,
    run_stage,
)

__all__ = [
    "ConsecutiveBadUpdates",
    "DEFAULT_STAGE_STEPS",
    "EpisodeResult",
    "EvalParams",
    "MissingPrerequisite",
    "NetBundle",
    "PreferenceAnchors",
    "RolloutBatch",
    "RolloutCollector",
    "RunConfig",
    "STAGES",
    "StagePlan",
    "TrainParams",
    "TrajPretrainParams",
    "UpdateResult",
    "anchor_choice",
    "categorical_kl",
    "compute_gae",
    "config_hash",
    "guide_targets",
    "load_ego_net",
    "load_social_net",
    "load_trajae",
    "normalize_advantages",
    "plan_for_stage",
    "ppo_loss",
    "ppo_update",
    "pretrain_trajae",
    "reg_loss",
    "run_stage",
]
