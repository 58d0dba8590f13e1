from .harness import (
    CurvePoint,
    EgoSpec,
    EvalCell,
    EvalReport,
    FamilySpec,
    KlEstimate,
    ProbeResult,
    STATE_SAMPLING_NOTE,
    collect_social_records,
    cross_evaluate,
    estimate_kl,
    probe_actions,
    run_episodes,
    sweep_preference_reward,
)

__all__ = [
    "CurvePoint",
    "EgoSpec",
    "EvalCell",
    "EvalReport",
    "FamilySpec",
    "KlEstimate",
    "ProbeResult",
    "STATE_SAMPLING_NOTE",
    "collect_social_records",
    "cross_evaluate",
    "estimate_kl",
    "probe_actions",
    "run_episodes",
    "sweep_preference_reward",
]
