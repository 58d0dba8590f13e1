from __future__ import annotations

import copy
import io
import json
import math

import numpy as np
import pytest

from tjunction.sim import (
    ACTION_SPEEDS,
    Env,
    FAIL,
    GOAL,
    RUNNING,
    ConfigError,
    ScenarioConfig,
    SimError,
    TraceWriter,
    agent_flags,
    base_reward,
    final_reward,
    observe,
    spawn,
    state_digest,
    step,
    track_for,
)
from tjunction.sim.env import _vehicle_at

from conftest import make_random_state, uniform_sampler


def beta_zero(rng):
    return 0.0


def test_spawn_same_seed_bitwise_identical():
    cfg = ScenarioConfig(seed=7)
    a = spawn(cfg, uniform_sampler(-1, 3))
    b = spawn(cfg, uniform_sampler(-1, 3))
    assert state_digest(a) == state_digest(b)


def test_spawn_different_seed_differs():
    cfg = ScenarioConfig(seed=7)
    a = spawn(cfg, uniform_sampler(-1, 3))
    b = spawn(cfg, uniform_sampler(-1, 3), seed=8)
    assert state_digest(a) != state_digest(b)


def test_spawn_empty_lane_gives_ego_only():
    cfg = ScenarioConfig(n_social_per_lane=0, seed=1)
    state = spawn(cfg, beta_zero)
    assert state.n_agents == 1
    assert observe(state, 0).rows.shape == (1, 4)


def test_spawn_gaps_match_recorded_draws():
    cfg = ScenarioConfig(n_social_per_lane=3, spawn_gap_range=(6.0, 12.0), seed=42)
    state = spawn(cfg, uniform_sampler(-1, 3))
    n = cfg.n_social_per_lane
    for lane, slots in (("lower", range(0, n)), ("upper", range(n, 2 * n))):
        progresses = [state.social[i].state.progress for i in slots]
        drawn = state.spawn_record["lanes"][lane]["gaps"]
        assert progresses == sorted(progresses)
        for k in range(n - 1):
            gap = progresses[k + 1] - progresses[k] - cfg.vehicle_length
            assert gap == pytest.approx(drawn[k], abs=1e-12)
            assert 6.0 <= gap <= 12.0


def test_spawn_initial_kinematics():
    cfg = ScenarioConfig(seed=3)
    state = spawn(cfg, beta_zero)
    assert (state.ego.x, state.ego.y) == (0.0, -12.0)
    assert state.ego.speed == 0.0
    for sv in state.social:
        assert sv.state.speed == 3.0
    assert agent_flags(state) == [RUNNING] * state.n_agents


def test_spawn_infeasible_rejected():
    cfg = ScenarioConfig(n_social_per_lane=8, spawn_gap_range=(6.0, 12.0), seed=1)
    with pytest.raises(ConfigError, match="cannot fit"):
        spawn(cfg, beta_zero)


def test_config_requires_exact_dt():
    with pytest.raises(ConfigError, match="dt"):
        ScenarioConfig(dt=0.2).validate()


def test_observe_ego_sees_no_preferences():
    cfg = ScenarioConfig(seed=11)
    state = spawn(cfg, uniform_sampler(0.5, 2.5))
    obs = observe(state, 0)
    assert obs.rows.shape == (state.n_agents, 4)
    assert not obs.has_preferences
    payload = obs.to_json()
    assert "beta" not in payload
    for sv in state.social:
        assert repr(sv.beta) not in payload


def test_observe_social_sees_betas_with_ego_slot_zeroed():
    cfg = ScenarioConfig(seed=11)
    state = spawn(cfg, beta_zero)
    state.social[1].beta = 2.5
    obs = observe(state, 1)
    assert obs.rows.shape == (state.n_agents, 5)
    assert obs.rows[2, 4] == 2.5
    assert obs.rows[0, 4] == 0.0
    assert obs.rows[1, 4] == state.social[0].beta


def test_observe_rejects_bad_viewer():
    state = spawn(ScenarioConfig(seed=1), beta_zero)
    with pytest.raises(SimError):
        observe(state, 99)


def test_position_update_is_exact_euler():
    cfg = ScenarioConfig(seed=5)
    state = spawn(cfg, beta_zero)
    # Lower-lane vehicle at x=10 exactly (progress 40 from entry at -30).
    v = state.social[0].state
    fresh = _vehicle_at(cfg, "lower", "social", 40.0, 3000)
    state.social[0].state = fresh
    out = step(state, [0] + [2] * 6)
    moved = out.next_state.social[0].state
    assert moved.x == 10.0 + 3.0 * 0.1
    assert moved.y == -2.0
    assert abs(moved.x - 10.3) < 1e-12


def test_speed_controller_rate_limit_from_standstill():
    cfg = ScenarioConfig(seed=5)
    state = spawn(cfg, beta_zero)
    out = step(state, [2] + [2] * 6)  # ego floors it
    assert out.next_state.ego.speed == 0.4
    out = step(state, [2] + [2] * 6)
    assert out.next_state.ego.speed == 0.8


def test_overlapping_vehicles_both_fail_with_fail_reward():
    cfg = ScenarioConfig(seed=9)
    state = spawn(cfg, beta_zero)
    a = _vehicle_at(cfg, "lower", "social", 30.0, 0)
    b = _vehicle_at(cfg, "lower", "social", 32.0, 0)  # 2m apart, length 4 -> overlap
    state.social[0].state = a
    state.social[1].state = b
    out = step(state, [0] * 7)
    assert out.flags[1] == FAIL and out.flags[2] == FAIL
    assert out.rewards[1] == cfg.r_fail
    assert out.rewards[2] == cfg.r_fail
    # Social-social collision does not end the ego's episode.
    assert not out.episode_done


def test_base_reward_cases():
    cfg = ScenarioConfig(seed=13)
    state = spawn(cfg, beta_zero)
    track = track_for("lower", cfg.road_half_length, cfg.lane_width)
    state.social[0].state = _vehicle_at(cfg, "lower", "social", track.length + 0.5, 3000)
    flags = agent_flags(state)
    assert flags[1] == GOAL
    assert base_reward(state, 1, flags) == 2.0

    cruising = base_reward(state, 2, flags)
    assert flags[2] == RUNNING
    assert abs(cruising - 0.01 * 3.0) < 1e-12

    state2 = spawn(cfg, beta_zero)
    state2.social[0].state = _vehicle_at(cfg, "lower", "social", 30.0, 0)
    state2.social[1].state = _vehicle_at(cfg, "lower", "social", 31.0, 0)
    flags2 = agent_flags(state2)
    assert flags2[1] == FAIL
    assert base_reward(state2, 1, flags2) == -2.0


def test_fail_takes_precedence_over_goal():
    cfg = ScenarioConfig(seed=13)
    state = spawn(cfg, beta_zero)
    track = track_for("lower", cfg.road_half_length, cfg.lane_width)
    # Two vehicles both past the track end and overlapping.
    state.social[0].state = _vehicle_at(cfg, "lower", "social", track.length + 0.1, 0)
    state.social[1].state = _vehicle_at(cfg, "lower", "social", track.length + 0.2, 0)
    flags = agent_flags(state)
    assert flags[1] == FAIL and flags[2] == FAIL


def test_offroad_is_fail():
    cfg = ScenarioConfig(seed=13)
    state = spawn(cfg, beta_zero)
    state.social[0].state.y += 0.6
    assert agent_flags(state)[1] == FAIL
    state.social[0].state.y -= 0.3
    assert agent_flags(state)[1] == RUNNING


def test_final_reward_beta_zero_collapses_to_base():
    rng = np.random.default_rng(0)
    for _ in range(50):
        state = make_random_state(rng)
        flags = agent_flags(state)
        for i in range(1, state.n_agents):
            assert final_reward(state, None, i, beta=0.0, flags=flags) == base_reward(state, i, flags)


def test_final_reward_weighted_by_preference():
    cfg = ScenarioConfig(seed=21)
    state = spawn(cfg, beta_zero)
    ego_track = track_for("ego-approach", cfg.road_half_length, cfg.lane_width)
    state.ego = _vehicle_at(cfg, "ego-approach", "ego", ego_track.length + 0.1, 0)
    flags = agent_flags(state)
    assert flags[0] == GOAL
    assert abs(final_reward(state, None, 1, beta=2.0, flags=flags) - 4.03) < 1e-12
    assert abs(final_reward(state, None, 1, beta=-1.0, flags=flags) - (-1.97)) < 1e-12


def test_transition_exactness_and_speed_clamp_random():
    rng = np.random.default_rng(7)
    for _ in range(300):
        state = make_random_state(rng)
        cfg = state.config
        before = [
            (v.x, v.y, v.vx, v.vy, v.mms)
            for v in [state.ego] + [sv.state for sv in state.social]
        ]
        actions = [int(rng.integers(0, 3)) for _ in range(state.n_agents)]
        out = step(state, actions)
        limit_mms = round(cfg.max_accel * cfg.dt * 1000)
        for idx, (x, y, vx, vy, mms) in enumerate(before):
            v = out.next_state.vehicle(idx)
            if idx >= 1 and out.flags[idx] != RUNNING:
                continue  # respawned this step
            assert abs(v.x - (x + vx * cfg.dt)) <= 1e-12
            assert abs(v.y - (y + vy * cfg.dt)) <= 1e-12
            assert abs(v.mms - mms) <= limit_mms
            assert 0 <= v.mms <= 3000
            assert abs(math.hypot(v.vx, v.vy) - v.speed) < 1e-12


def test_step_on_finished_episode_raises():
    cfg = ScenarioConfig(seed=2, timeout_steps=3)
    env = Env(cfg, beta_zero)
    env.reset()
    for _ in range(3):
        env.step([0] * 7)
    assert env.done
    with pytest.raises(SimError):
        env.step([0] * 7)


def test_episode_bounded_by_timeout():
    cfg = ScenarioConfig(seed=31)
    env = Env(cfg, uniform_sampler(-1, 3))
    rng = np.random.default_rng(0)
    for ep in range(5):
        env.reset(100 + ep)
        steps = 0
        while not env.done:
            env.step([int(rng.integers(0, 3)) for _ in range(7)])
            steps += 1
            assert steps <= cfg.timeout_steps
        assert steps <= cfg.timeout_steps


def test_social_goal_respawns_same_slot_keeps_beta():
    cfg = ScenarioConfig(seed=17)
    env = Env(cfg, uniform_sampler(0.5, 2.5))
    state = env.reset()
    betas = [sv.beta for sv in state.social]
    lead = max(range(len(state.social)), key=lambda i: state.social[i].state.progress if state.social[i].state.lane == "lower" else -1)
    saw_goal = False
    while not env.done:
        out = env.step([0] + [2] * 6)
        if out.flags[lead + 1] == GOAL:
            saw_goal = True
            fresh = env.state.social[lead].state
            assert fresh.progress < 5.0
            assert fresh.speed == 3.0
            break
    assert saw_goal
    assert len(env.state.social) == 6
    assert [sv.beta for sv in env.state.social] == betas


def test_respawn_defers_behind_blocked_entry():
    cfg = ScenarioConfig(seed=23)
    state = spawn(cfg, beta_zero)
    # Park a vehicle on the entry, then force slot 1 to respawn into that lane.
    state.social[0].state = _vehicle_at(cfg, "lower", "social", cfg.vehicle_length / 2, 0)
    track = track_for("lower", cfg.road_half_length, cfg.lane_width)
    state.social[1].state = _vehicle_at(cfg, "lower", "social", track.length + 1.0, 3000)
    out = step(state, [0] * 7)
    assert out.flags[2] == GOAL
    respawned = out.next_state.social[1].state
    blocker = out.next_state.social[0].state
    gap = blocker.progress - respawned.progress - cfg.vehicle_length
    assert respawned.progress < 0
    assert 6.0 <= gap <= 12.0


def test_episode_determinism_trace_bytes():
    cfg = ScenarioConfig(seed=19)
    traces = []
    for _ in range(2):
        env = Env(cfg, uniform_sampler(-1, 3))
        env.reset(55)
        buf = io.StringIO()
        w = TraceWriter(buf)
        w.write_header(env.state, seed=55)
        rng = np.random.default_rng(9)
        while not env.done:
            actions = [int(rng.integers(0, 3)) for _ in range(7)]
            out = env.step(actions)
            w.write_step(out, actions)
        traces.append(buf.getvalue())
    assert traces[0] == traces[1]
    first = json.loads(traces[0].splitlines()[0])
    assert first["seed"] == 55 and "config" in first and "spawn" in first


def test_ego_can_reach_goal():
    cfg = ScenarioConfig(n_social_per_lane=0, seed=1)
    env = Env(cfg, beta_zero)
    env.reset()
    while not env.done:
        out = env.step([2])
    assert out.flags[0] == GOAL
    assert out.rewards[0] == cfg.r_goal
    assert out.episode_done


def test_ego_track_geometry():
    track = track_for("ego-approach", 30.0, 4.0)
    assert track.length == pytest.approx(8.0 + 6.0 * math.pi / 2 + 24.0)
    assert track.point_at(0.0) == (0.0, -12.0)
    assert track.point_at(8.0) == pytest.approx((0.0, -4.0))
    x, y = track.point_at(8.0 + 6.0 * math.pi / 2)
    assert (x, y) == pytest.approx((-6.0, 2.0))
    assert track.point_at(track.length) == pytest.approx((-30.0, 2.0))
    tx, ty = track.tangent_at(track.length - 1.0)
    assert (tx, ty) == (-1.0, 0.0)


def test_ego_stays_inside_corridor_through_turn():
    cfg = ScenarioConfig(n_social_per_lane=0, seed=1)
    env = Env(cfg, beta_zero)
    env.reset()
    track = track_for("ego-approach", cfg.road_half_length, cfg.lane_width)
    worst = 0.0
    while not env.done:
        env.step([2])
        v = env.state.ego
        worst = max(worst, track.lateral_offset(v.x, v.y, min(v.progress, track.length)))
    assert worst < 0.5  # Euler drift on the arc stays inside the corridor


def test_action_speeds_fixed():
    assert ACTION_SPEEDS == (0.0, 0.5, 3.0)
