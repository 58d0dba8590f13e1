"""Waypoint tracks: arc-length parameterized paths that vehicles follow.

Geometry of the T-intersection (all meters):

* Horizontal road spans ``x in [-road_half_length, +road_half_length]``.
* Two lanes of width ``lane_width``: the upper lane (center ``y = +lane_width/2``,
  traffic moves in -x) and the lower lane (center ``y = -lane_width/2``,
  traffic moves in +x).
* The ego approaches on a vertical lane at ``x = 0`` from below, then takes a
  quarter-circle left turn of radius ``TURN_RADIUS`` and continues along the
  upper lane until it leaves the road at ``x = -road_half_length``.

Progress ``s`` is distance traveled along the track. For straight lanes,
negative progress extrapolates behind the lane entry, which is how respawned
vehicles queue upstream without overlapping on-road traffic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

TURN_RADIUS = 6.0
APPROACH_LENGTH = 8.0


@dataclass(frozen=True)
class _Line:
    x0: float
    y0: float
    dx: float
    dy: float
    length: float

    def point(self, s: float) -> tuple[float, float]:
        return (self.x0 + self.dx * s, self.y0 + self.dy * s)

    def tangent(self, s: float) -> tuple[float, float]:
        return (self.dx, self.dy)


@dataclass(frozen=True)
class _Arc:
    cx: float
    cy: float
    radius: float
    angle0: float
    length: float

    def point(self, s: float) -> tuple[float, float]:
        a = self.angle0 + s / self.radius
        return (self.cx + self.radius * math.cos(a), self.cy + self.radius * math.sin(a))

    def tangent(self, s: float) -> tuple[float, float]:
        a = self.angle0 + s / self.radius
        return (-math.sin(a), math.cos(a))


class Track:
    """Piecewise line/arc path with arc-length lookup."""

    def __init__(self, segments):
        self.segments = tuple(segments)
        self.length = sum(seg.length for seg in self.segments)

    def _locate(self, s: float):
        # Negative progress and overshoot clamp to the first/last segment so
        # tangents stay defined at the track ends.
        remaining = s
        for seg in self.segments[:-1]:
            if remaining <= seg.length:
                return seg, remaining
            remaining -= seg.length
        return self.segments[-1], remaining

    def point_at(self, s: float) -> tuple[float, float]:
        seg, local = self._locate(s)
        return seg.point(local)

    def tangent_at(self, s: float) -> tuple[float, float]:
        seg, local = self._locate(s)
        return seg.tangent(local)

    def lateral_offset(self, x: float, y: float, s: float) -> float:
        """Distance between (x, y) and the track point at progress s."""
        px, py = self.point_at(s)
        return math.hypot(x - px, y - py)


@lru_cache(maxsize=None)
def lane_track(lane: str, road_half_length: float, lane_width: float) -> Track:
    half = lane_width / 2.0
    if lane == "lower":
        return Track([_Line(-road_half_length, -half, 1.0, 0.0, 2.0 * road_half_length)])
    if lane == "upper":
        return Track([_Line(road_half_length, half, -1.0, 0.0, 2.0 * road_half_length)])
    raise ValueError(f"unknown lane {lane!r}")


@lru_cache(maxsize=None)
def ego_track(road_half_length: float, lane_width: float) -> Track:
    half = lane_width / 2.0
    turn_start_y = half - TURN_RADIUS
    spawn_y = turn_start_y - APPROACH_LENGTH
    arc_len = TURN_RADIUS * math.pi / 2.0
    exit_len = road_half_length - TURN_RADIUS
    return Track(
        [
            _Line(0.0, spawn_y, 0.0, 1.0, APPROACH_LENGTH),
            _Arc(-TURN_RADIUS, turn_start_y, TURN_RADIUS, 0.0, arc_len),
            _Line(-TURN_RADIUS, half, -1.0, 0.0, exit_len),
        ]
    )


def track_for(lane: str, road_half_length: float, lane_width: float) -> Track:
    if lane == "ego-approach":
        return ego_track(road_half_length, lane_width)
    return lane_track(lane, road_half_length, lane_width)
