"""Rule-based social driving: the intelligent driver model adapted to the
discrete desired-speed action set.

Two named styles are shipped: ``idm-conservative`` yields to an ego vehicle
that intrudes into its lane corridor, ``idm-aggressive`` ignores the ego
entirely. Each maps the continuous IDM acceleration onto the nearest
candidate desired speed, breaking ties toward the lower speed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .sim.collision import rect_corners
from .sim.types import ACTION_SPEEDS, MAX_SPEED, Observation

# Emergency deceleration used when the gap is non-positive (full braking).
FULL_BRAKE = 8.0


@dataclass(frozen=True)
class IdmParams:
    desired_speed: float = 3.0
    time_headway: float = 1.5
    min_gap: float = 3.0
    accel: float = 2.0
    comfort_decel: float = 2.0
    exponent: float = 4.0
    yields_to_ego: bool = True

    def validate(self) -> None:
        for name in ("desired_speed", "time_headway", "min_gap", "accel", "comfort_decel", "exponent"):
            if getattr(self, name) <= 0:
                raise ValueError(f"IdmParams.{name} must be positive")


PRESETS: dict[str, IdmParams] = {
    "idm-conservative": IdmParams(time_headway=1.5, min_gap=3.0, yields_to_ego=True),
    "idm-aggressive": IdmParams(time_headway=0.5, min_gap=1.5, yields_to_ego=False),
}


def get_params(name: str) -> IdmParams:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown IDM preset {name!r}; have {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class IdmGeometry:
    """Scenario constants the policy adapter needs to read an observation."""

    vehicle_length: float = 4.0
    vehicle_width: float = 2.0
    lane_width: float = 4.0
    dt: float = 0.1


DEFAULT_GEOMETRY = IdmGeometry()


def idm_accel(speed: float, gap: float, leader_speed: float, params: IdmParams) -> float:
    """IDM acceleration. A non-positive gap returns full emergency braking."""
    if gap <= 0.0:
        return -FULL_BRAKE
    closing = speed - leader_speed
    s_star = params.min_gap + speed * params.time_headway + speed * closing / (
        2.0 * math.sqrt(params.accel * params.comfort_decel)
    )
    return params.accel * (1.0 - (speed / params.desired_speed) ** params.exponent - (s_star / gap) ** 2)


def ego_intrudes_corridor(
    obs: Observation, viewer: int, geometry: IdmGeometry = DEFAULT_GEOMETRY
) -> tuple[float, float] | None:
    """If the ego footprint enters the viewer's lane band ahead of the viewer,
    return (gap to its nearest edge, ego speed along the lane); else None.

    The ego heading is taken from its velocity; a stationary ego is assumed to
    point up the approach (+y).
    """
    rows = obs.rows
    me = rows[viewer]
    ex, ey, evx, evy = rows[0][:4]
    espeed = math.hypot(evx, evy)
    if espeed > 1e-9:
        hx, hy = evx / espeed, evy / espeed
    else:
        hx, hy = 0.0, 1.0
    corners = rect_corners(ex, ey, hx, hy, geometry.vehicle_length, geometry.vehicle_width)

    half = geometry.lane_width / 2.0
    lane_center = half if me[1] > 0 else -half
    band_lo, band_hi = lane_center - half, lane_center + half
    ys = [c[1] for c in corners]
    if max(ys) <= band_lo or min(ys) >= band_hi:
        return None

    direction = -1.0 if me[1] > 0 else 1.0
    my_nose = me[0] * direction + geometry.vehicle_length / 2.0
    projs = [c[0] * direction for c in corners]
    if max(projs) <= my_nose:
        return None
    gap = min(projs) - my_nose
    return gap, evx * direction


def idm_policy(
    obs: Observation,
    params: IdmParams,
    geometry: IdmGeometry = DEFAULT_GEOMETRY,
) -> int:
    """Choose the discrete action whose desired speed is nearest to the
    IDM-integrated target speed (ties break toward the lower speed)."""
    if obs.viewer == 0:
        raise ValueError("idm_policy controls social vehicles only")
    rows = obs.rows
    me = rows[obs.viewer]
    my_y = me[1]
    direction = -1.0 if my_y > 0 else 1.0
    speed = math.hypot(me[2], me[3])

    gap = math.inf
    leader_speed = 0.0
    for j in range(1, rows.shape[0]):
        if j == obs.viewer:
            continue
        other = rows[j]
        if abs(other[1] - my_y) > geometry.lane_width / 2.0:
            continue
        ahead = (other[0] - me[0]) * direction
        if ahead <= 0:
            continue
        g = ahead - geometry.vehicle_length
        if g < gap:
            gap = g
            leader_speed = other[2] * direction

    if params.yields_to_ego:
        intrusion = ego_intrudes_corridor(obs, obs.viewer, geometry)
        if intrusion is not None and intrusion[0] < gap:
            gap, leader_speed = intrusion

    if gap <= 0.0:
        return 0  # emergency: command a zero desired speed outright

    accel = idm_accel(speed, gap, leader_speed, params)
    target = min(max(speed + accel * geometry.dt, 0.0), MAX_SPEED)
    best = 0
    best_err = abs(ACTION_SPEEDS[0] - target)
    for idx in range(1, len(ACTION_SPEEDS)):
        err = abs(ACTION_SPEEDS[idx] - target)
        if err < best_err:  # ties keep the earlier (lower) speed
            best = idx
            best_err = err
    return best
