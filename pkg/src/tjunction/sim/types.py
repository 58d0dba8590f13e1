"""Core state containers for the T-intersection game."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Any

import numpy as np

# Discrete action set: index -> desired speed (m/s).
ACTION_SPEEDS = (0.0, 0.5, 3.0)
N_ACTIONS = len(ACTION_SPEEDS)
MAX_SPEED = 3.0

# Per-step agent flags.
RUNNING = "running"
GOAL = "goal"
FAIL = "fail"

# Speeds are tracked internally in integer milli-m/s so the acceleration
# rate limit holds exactly in every step.
SPEED_SCALE = 1000


class SimError(Exception):
    """Contract violation inside the simulator (acting on a finished episode, ...)."""


class ConfigError(Exception):
    """Invalid or infeasible scenario configuration."""


@dataclass
class ScenarioConfig:
    n_social_per_lane: int = 3
    spawn_gap_range: tuple[float, float] = (6.0, 12.0)
    road_half_length: float = 30.0
    lane_width: float = 4.0
    vehicle_length: float = 4.0
    vehicle_width: float = 2.0
    dt: float = 0.1
    timeout_steps: int = 400
    r_goal: float = 2.0
    r_fail: float = -2.0
    r_speed: float = 0.01
    max_accel: float = 4.0
    seed: int = 0

    @property
    def n_social(self) -> int:
        return 2 * self.n_social_per_lane

    def validate(self) -> None:
        if self.dt != 0.1:
            raise ConfigError(f"dt must be exactly 0.1s, got {self.dt}")
        for name in ("road_half_length", "lane_width", "vehicle_length", "vehicle_width"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_social_per_lane < 0:
            raise ConfigError("n_social_per_lane must be >= 0")
        lo, hi = self.spawn_gap_range
        if not (0 < lo <= hi):
            raise ConfigError(f"spawn_gap_range must satisfy 0 < lo <= hi, got {self.spawn_gap_range}")
        if self.timeout_steps <= 0:
            raise ConfigError("timeout_steps must be positive")
        if self.max_accel <= 0:
            raise ConfigError("max_accel must be positive")
        n = self.n_social_per_lane
        if n > 0:
            span = n * self.vehicle_length + (n - 1) * lo
            road = 2 * self.road_half_length
            if span > road:
                raise ConfigError(
                    f"cannot fit {n} vehicles of length {self.vehicle_length} with minimum "
                    f"gap {lo} on a road of length {road} (need {span})"
                )

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["spawn_gap_range"] = list(self.spawn_gap_range)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ScenarioConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
        kwargs = dict(d)
        if "spawn_gap_range" in kwargs:
            kwargs["spawn_gap_range"] = tuple(kwargs["spawn_gap_range"])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclass
class VehicleState:
    x: float
    y: float
    vx: float
    vy: float
    progress: float
    mms: int  # speed in milli-m/s; authoritative controller state
    role: str  # "ego" | "social"
    lane: str  # "lower" | "upper" | "ego-approach"

    @property
    def speed(self) -> float:
        return self.mms / SPEED_SCALE


@dataclass
class SocialVehicle:
    state: VehicleState
    beta: float


@dataclass
class GlobalState:
    ego: VehicleState
    social: list[SocialVehicle]
    step_index: int
    rng: np.random.Generator
    config: ScenarioConfig
    done: bool = False
    ego_flag: str = RUNNING
    spawn_record: dict[str, Any] = field(default_factory=dict)

    @property
    def n_agents(self) -> int:
        return 1 + len(self.social)

    def vehicle(self, index: int) -> VehicleState:
        return self.ego if index == 0 else self.social[index - 1].state

    def beta_of(self, index: int) -> float:
        if index == 0:
            raise SimError("the ego agent has no preference")
        return self.social[index - 1].beta


@dataclass
class Observation:
    """Role-dependent view of the global state.

    ``rows`` has one row per vehicle, ego first then social slots in order.
    Ego viewers get 4 columns (x, y, vx, vy); the type carries no preference
    column at all. Social viewers get 5 columns (x, y, vx, vy, beta) with the
    ego's preference slot zero-padded.
    """

    viewer: int
    rows: np.ndarray

    @property
    def has_preferences(self) -> bool:
        return self.rows.shape[1] == 5

    def to_json(self) -> str:
        return json.dumps(
            {
                "viewer": self.viewer,
                "columns": ["x", "y", "vx", "vy", "beta"] if self.has_preferences else ["x", "y", "vx", "vy"],
                "rows": [[float(v) for v in row] for row in self.rows],
            }
        )


@dataclass
class StepOutcome:
    next_state: GlobalState
    rewards: np.ndarray  # float64, index 0 = ego
    flags: list[str]
    episode_done: bool
