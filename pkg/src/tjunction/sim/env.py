"""Discrete-time T-intersection game: spawning, observation, transition, rewards.

Conventions used throughout:

* Agent index 0 is the ego; indices ``1..n`` are social vehicles in slot order
  (lower lane rear-to-front, then upper lane rear-to-front).
* One step: positions advance with the *current* velocity (``p' = p + v*dt``),
  track progress advances by ``speed*dt``, then the low-level controller moves
  speed toward the commanded desired speed, rate-limited by ``max_accel*dt``,
  and the velocity is re-aimed along the track tangent at the new progress.
* Flags are evaluated on the post-physics state. ``fail`` (rectangle overlap
  or leaving the track corridor by more than ``OFFROAD_TOLERANCE``) takes
  precedence over ``goal`` (track end reached) in the same step.
* Social vehicles whose participation ended (goal or fail) are respawned at
  their lane entry in the same transition, keeping the agent count constant.
  They keep their slot's preference. If the entry is blocked, the respawn is
  placed behind the rear-most lane occupant at a freshly drawn gap, which may
  put it upstream of the road end (negative progress).

Speeds are held in integer milli-m/s so the acceleration rate limit is exact.
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Callable, IO, Sequence

import numpy as np

from .collision import rect_corners, rects_overlap
from .track import track_for
from .types import (
    ACTION_SPEEDS,
    FAIL,
    GOAL,
    RUNNING,
    SPEED_SCALE,
    ConfigError,
    GlobalState,
    Observation,
    ScenarioConfig,
    SimError,
    SocialVehicle,
    StepOutcome,
    VehicleState,
)

OFFROAD_TOLERANCE = 0.5

PreferenceSampler = Callable[[np.random.Generator], float]

_DESIRED_MMS = tuple(round(s * SPEED_SCALE) for s in ACTION_SPEEDS)
_MAX_MMS = max(_DESIRED_MMS)


def _track(cfg: ScenarioConfig, lane: str):
    return track_for(lane, cfg.road_half_length, cfg.lane_width)


def _tracks_of(state: GlobalState) -> list:
    # Lane assignments never change after spawn; cache per-agent tracks.
    tracks = getattr(state, "_tracks", None)
    if tracks is None:
        cfg = state.config
        tracks = [_track(cfg, state.vehicle(i).lane) for i in range(state.n_agents)]
        state._tracks = tracks
    return tracks


def _vehicle_at(cfg: ScenarioConfig, lane: str, role: str, progress: float, mms: int) -> VehicleState:
    track = _track(cfg, lane)
    x, y = track.point_at(progress)
    tx, ty = track.tangent_at(progress)
    speed = mms / SPEED_SCALE
    return VehicleState(x=x, y=y, vx=speed * tx, vy=speed * ty, progress=progress, mms=mms, role=role, lane=lane)


def spawn(config: ScenarioConfig, preference_sampler: PreferenceSampler, *, seed: int | None = None) -> GlobalState:
    """Create the initial state. Deterministic given the seed.

    Per lane, the rear-most vehicle's tail sits at the lane entry and each
    vehicle ahead of it is placed nose-to-tail at a gap drawn uniformly from
    ``spawn_gap_range``. Draw order (fixed): lower-lane gaps, lower-lane
    preferences rear-to-front, then the same for the upper lane.
    """
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    n = config.n_social_per_lane
    lo, hi = config.spawn_gap_range

    social: list[SocialVehicle] = []
    record: dict = {"lanes": {}, "betas": []}
    for lane in ("lower", "upper"):
        gaps = [float(rng.uniform(lo, hi)) for _ in range(max(0, n - 1))]
        progress = config.vehicle_length / 2.0
        positions = [progress]
        for g in gaps:
            progress += config.vehicle_length + g
            positions.append(progress)
        betas = [float(preference_sampler(rng)) for _ in range(n)]
        for p, beta in zip(positions, betas):
            social.append(SocialVehicle(state=_vehicle_at(config, lane, "social", p, _MAX_MMS), beta=beta))
        record["lanes"][lane] = {"gaps": gaps, "progress": positions}
        record["betas"].extend(betas)

    ego = _vehicle_at(config, "ego-approach", "ego", 0.0, 0)
    return GlobalState(ego=ego, social=social, step_index=0, rng=rng, config=config, spawn_record=record)


def observe(state: GlobalState, viewer: int) -> Observation:
    """Build the viewer's observation. Ego viewers never see preferences."""
    if not 0 <= viewer <= len(state.social):
        raise SimError(f"invalid viewer index {viewer}")
    rows = _state_rows(state)
    if viewer == 0:
        return Observation(viewer=0, rows=rows[:, :4].copy())
    return Observation(viewer=viewer, rows=rows)


def _state_rows(state: GlobalState) -> np.ndarray:
    rows = np.empty((state.n_agents, 5), dtype=np.float64)
    ego = state.ego
    rows[0] = (ego.x, ego.y, ego.vx, ego.vy, 0.0)
    for i, sv in enumerate(state.social, start=1):
        v = sv.state
        rows[i] = (v.x, v.y, v.vx, v.vy, sv.beta)
    return rows


def agent_flags(state: GlobalState) -> list[str]:
    """Per-agent {running|goal|fail} evaluated on the given state."""
    cfg = state.config
    n = state.n_agents
    tracks = _tracks_of(state)
    length, width = cfg.vehicle_length, cfg.vehicle_width
    reach = math.hypot(length, width)  # circle prefilter: 2 * (diagonal / 2)
    reach2 = reach * reach

    vehicles = [state.vehicle(i) for i in range(n)]
    tangents = [tracks[i].tangent_at(vehicles[i].progress) for i in range(n)]
    corners: list = [None] * n
    collided = [False] * n
    for i in range(n):
        vi = vehicles[i]
        for j in range(i + 1, n):
            vj = vehicles[j]
            dx = vi.x - vj.x
            dy = vi.y - vj.y
            if dx * dx + dy * dy > reach2:
                continue
            if corners[i] is None:
                corners[i] = rect_corners(vi.x, vi.y, tangents[i][0], tangents[i][1], length, width)
            if corners[j] is None:
                corners[j] = rect_corners(vj.x, vj.y, tangents[j][0], tangents[j][1], length, width)
            if rects_overlap(corners[i], tangents[i], corners[j], tangents[j]):
                collided[i] = True
                collided[j] = True

    tol2 = OFFROAD_TOLERANCE * OFFROAD_TOLERANCE
    flags = []
    for idx in range(n):
        v = vehicles[idx]
        track = tracks[idx]
        if collided[idx]:
            flags.append(FAIL)
            continue
        px, py = track.point_at(v.progress)
        ox = v.x - px
        oy = v.y - py
        if ox * ox + oy * oy > tol2:
            flags.append(FAIL)
        elif v.progress >= track.length:
            flags.append(GOAL)
        else:
            flags.append(RUNNING)
    return flags


def base_reward(state: GlobalState, agent: int, flags: list[str] | None = None) -> float:
    """Goal/fail/speed-shaped base reward for one agent on this state."""
    if flags is None:
        flags = agent_flags(state)
    flag = flags[agent]
    cfg = state.config
    if flag == FAIL:
        return cfg.r_fail
    if flag == GOAL:
        return cfg.r_goal
    v = state.vehicle(agent)
    return cfg.r_speed * math.hypot(v.vx, v.vy)


def final_reward(
    state: GlobalState,
    joint_action: Sequence[int] | None,
    agent: int,
    beta: float | None = None,
    flags: list[str] | None = None,
) -> float:
    """Ego keeps its base reward; social agents add beta times the ego's."""
    if flags is None:
        flags = agent_flags(state)
    if agent == 0:
        return base_reward(state, 0, flags)
    if beta is None:
        beta = state.beta_of(agent)
    return base_reward(state, agent, flags) + beta * base_reward(state, 0, flags)


def _rate_limited_mms(mms: int, desired_mms: int, limit_mms: int) -> int:
    delta = desired_mms - mms
    if delta > limit_mms:
        delta = limit_mms
    elif delta < -limit_mms:
        delta = -limit_mms
    out = mms + delta
    if out < 0:
        return 0
    if out > _MAX_MMS:
        return _MAX_MMS
    return out


def _advance(v: VehicleState, track, dt: float, desired_mms: int, limit_mms: int) -> None:
    v.x = v.x + v.vx * dt
    v.y = v.y + v.vy * dt
    v.progress = v.progress + (v.mms / SPEED_SCALE) * dt
    v.mms = _rate_limited_mms(v.mms, desired_mms, limit_mms)
    tx, ty = track.tangent_at(v.progress)
    speed = v.mms / SPEED_SCALE
    v.vx = speed * tx
    v.vy = speed * ty


def _respawn_slot(state: GlobalState, slot: int) -> None:
    cfg = state.config
    lane = state.social[slot].state.lane
    entry = cfg.vehicle_length / 2.0
    rear = None
    for j, sv in enumerate(state.social):
        if j != slot and sv.state.lane == lane:
            if rear is None or sv.state.progress < rear:
                rear = sv.state.progress
    lo, hi = cfg.spawn_gap_range
    progress = entry
    if rear is not None and entry > rear - cfg.vehicle_length - lo:
        gap = float(state.rng.uniform(lo, hi))
        progress = rear - cfg.vehicle_length - gap
    state.social[slot].state = _vehicle_at(cfg, lane, "social", progress, _MAX_MMS)


def step(state: GlobalState, joint_action: Sequence[int]) -> StepOutcome:
    """Advance the game one tick. Mutates and returns the same state object."""
    if state.done:
        raise SimError("step() called on a finished episode")
    if len(joint_action) != state.n_agents:
        raise SimError(f"expected {state.n_agents} actions, got {len(joint_action)}")
    cfg = state.config
    limit_mms = round(cfg.max_accel * cfg.dt * SPEED_SCALE)
    tracks = _tracks_of(state)

    for idx, action in enumerate(joint_action):
        if not 0 <= action < len(ACTION_SPEEDS):
            raise SimError(f"action index {action} out of range for agent {idx}")
        _advance(state.vehicle(idx), tracks[idx], cfg.dt, _DESIRED_MMS[action], limit_mms)

    flags = agent_flags(state)
    ego_base = base_reward(state, 0, flags)
    rewards = np.empty(state.n_agents, dtype=np.float64)
    rewards[0] = ego_base
    for i, sv in enumerate(state.social, start=1):
        rewards[i] = base_reward(state, i, flags) + sv.beta * ego_base

    for i in range(1, state.n_agents):
        if flags[i] != RUNNING:
            _respawn_slot(state, i - 1)

    state.step_index += 1
    state.ego_flag = flags[0]
    state.done = flags[0] != RUNNING or state.step_index >= cfg.timeout_steps
    return StepOutcome(next_state=state, rewards=rewards, flags=flags, episode_done=state.done)


class Env:
    """One episode-granular environment instance.

    Safe to instantiate many of these in parallel; each owns an independent
    seeded stream and no state is shared between instances.
    """

    def __init__(self, config: ScenarioConfig, preference_sampler: PreferenceSampler):
        config.validate()
        self.config = config
        self.preference_sampler = preference_sampler
        self.state: GlobalState | None = None

    def reset(self, seed: int | None = None) -> GlobalState:
        self.state = spawn(self.config, self.preference_sampler, seed=seed)
        return self.state

    @property
    def done(self) -> bool:
        return self.state is None or self.state.done

    def observe(self, viewer: int) -> Observation:
        return observe(self.state, viewer)

    def observe_all(self) -> list[Observation]:
        """Observations for every agent; social viewers share one row array."""
        rows = _state_rows(self.state)
        obs = [Observation(viewer=0, rows=rows[:, :4].copy())]
        for i in range(1, self.state.n_agents):
            obs.append(Observation(viewer=i, rows=rows))
        return obs

    def step(self, joint_action: Sequence[int]) -> StepOutcome:
        return step(self.state, joint_action)


def state_digest(state: GlobalState) -> str:
    """Canonical fingerprint of the full state, including the RNG stream."""
    doc = {
        "config": state.config.to_dict(),
        "step_index": state.step_index,
        "done": state.done,
        "ego_flag": state.ego_flag,
        "spawn_record": state.spawn_record,
        "vehicles": [
            {
                "x": v.x.hex(), "y": v.y.hex(), "vx": v.vx.hex(), "vy": v.vy.hex(),
                "progress": v.progress.hex(), "mms": v.mms, "role": v.role, "lane": v.lane,
            }
            for v in [state.ego] + [sv.state for sv in state.social]
        ],
        "betas": [sv.beta.hex() for sv in state.social],
        "rng": json.loads(json.dumps(state.rng.bit_generator.state, default=int)),
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def sampler_from_spec(spec: dict) -> PreferenceSampler:
    """Rebuild a preference sampler from its serialized form.

    Replay depends on the sampler consuming the exact same random draws as the
    original run, so the spec records the draw pattern, not just the values:
    ``zero``/``const`` consume nothing, ``anchors`` consumes one integer draw,
    ``range`` consumes one uniform draw per spawned vehicle.
    """
    mode = spec.get("mode", "zero")
    if mode == "zero":
        return lambda rng: 0.0
    if mode == "const":
        value = float(spec["value"])
        return lambda rng: value
    if mode == "anchors":
        values = tuple(float(v) for v in spec["values"])
        return lambda rng: values[int(rng.integers(0, len(values)))]
    if mode == "range":
        lo, hi = float(spec["lo"]), float(spec["hi"])
        return lambda rng: float(rng.uniform(lo, hi))
    raise ValueError(f"unknown sampler mode {mode!r}")


TRACE_VERSION = 1
TRACE_AGENT_FIELDS = (
    "id", "role", "lane", "x", "y", "vx", "vy", "progress", "speed", "beta", "action", "reward", "flag",
)


class TraceWriter:
    """Episode trace as JSONL: one header line, then one line per step.

    Agent fields appear in the fixed order of ``TRACE_AGENT_FIELDS``; the
    ego's ``beta`` is null. Post-step vehicle states are recorded together
    with the actions that produced them.
    """

    def __init__(self, fh: IO[str]):
        self.fh = fh

    def write_header(self, state: GlobalState, seed: int | None = None, sampler_spec: dict | None = None) -> None:
        doc = {
            "trace_version": TRACE_VERSION,
            "seed": state.config.seed if seed is None else seed,
            "config": state.config.to_dict(),
            "sampler": sampler_spec or {"mode": "zero"},
            "spawn": state.spawn_record,
        }
        self.fh.write(json.dumps(doc) + "\n")

    def write_step(self, outcome: StepOutcome, joint_action: Sequence[int]) -> None:
        state = outcome.next_state
        agents = []
        for idx in range(state.n_agents):
            v = state.vehicle(idx)
            agents.append(
                {
                    "id": idx,
                    "role": v.role,
                    "lane": v.lane,
                    "x": v.x,
                    "y": v.y,
                    "vx": v.vx,
                    "vy": v.vy,
                    "progress": v.progress,
                    "speed": v.speed,
                    "beta": None if idx == 0 else state.social[idx - 1].beta,
                    "action": int(joint_action[idx]),
                    "reward": float(outcome.rewards[idx]),
                    "flag": outcome.flags[idx],
                }
            )
        line = {"step": state.step_index - 1, "agents": agents, "done": outcome.episode_done}
        self.fh.write(json.dumps(line) + "\n")
