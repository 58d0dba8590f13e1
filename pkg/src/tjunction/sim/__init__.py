from .types import (
    ACTION_SPEEDS,
    FAIL,
    GOAL,
    MAX_SPEED,
    N_ACTIONS,
    RUNNING,
    ConfigError,
    GlobalState,
    Observation,
    ScenarioConfig,
    SimError,
    SocialVehicle,
    StepOutcome,
    VehicleState,
)
from .env import (
    Env,
    OFFROAD_TOLERANCE,
    TraceWriter,
    agent_flags,
    base_reward,
    final_reward,
    observe,
    spawn,
    state_digest,
    step,
)
from .track import APPROACH_LENGTH, TURN_RADIUS, Track, ego_track, lane_track, track_for

__all__ = [
    "ACTION_SPEEDS",
    "APPROACH_LENGTH",
    "ConfigError",
    "Env",
    "FAIL",
    "GOAL",
    "GlobalState",
    "MAX_SPEED",
    "N_ACTIONS",
    "OFFROAD_TOLERANCE",
    "Observation",
    "RUNNING",
    "ScenarioConfig",
    "SimError",
    "SocialVehicle",
    "StepOutcome",
    "Track",
    "TraceWriter",
    "TURN_RADIUS",
    "VehicleState",
    "agent_flags",
    "base_reward",
    "ego_track",
    "final_reward",
    "lane_track",
    "observe",
    "spawn",
    "state_digest",
    "step",
    "track_for",
]
