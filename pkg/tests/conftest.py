from __future__ import annotations

import numpy as np

from tjunction.sim import ScenarioConfig, spawn
from tjunction.sim.env import _vehicle_at


def uniform_sampler(lo: float, hi: float):
    return lambda rng: float(rng.uniform(lo, hi))


def make_random_state(rng: np.random.Generator, config: ScenarioConfig | None = None):
    """A randomized but reachable-looking global state.

    Vehicles sit on their tracks at random progress with speeds on the
    controller's milli-m/s grid; a fraction get nudged laterally so off-road
    and collision branches are exercised too.
    """
    cfg = config or ScenarioConfig(seed=int(rng.integers(0, 2**31 - 1)))
    state = spawn(cfg, uniform_sampler(-1.0, 3.0), seed=int(rng.integers(0, 2**31 - 1)))
    agents = [state.ego] + [sv.state for sv in state.social]
    from tjunction.sim import track_for

    for v in agents:
        track = track_for(v.lane, cfg.road_half_length, cfg.lane_width)
        progress = float(rng.uniform(-2.0, track.length + 1.0))
        mms = int(rng.integers(0, 31)) * 100
        fresh = _vehicle_at(cfg, v.lane, v.role, progress, mms)
        v.x, v.y, v.vx, v.vy, v.progress, v.mms = fresh.x, fresh.y, fresh.vx, fresh.vy, fresh.progress, fresh.mms
        if rng.random() < 0.15:
            v.x += float(rng.uniform(-1.0, 1.0))
            v.y += float(rng.uniform(-1.0, 1.0))
    return state
