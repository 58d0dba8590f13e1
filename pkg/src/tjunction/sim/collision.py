"""Oriented-rectangle collision tests (separating axis) with a cheap circle prefilter."""

from __future__ import annotations

import math


def rect_corners(cx: float, cy: float, hx: float, hy: float, length: float, width: float):
    """Corners of a rectangle centered at (cx, cy) with unit heading (hx, hy)."""
    lx, ly = hx * length / 2.0, hy * length / 2.0
    wx, wy = -hy * width / 2.0, hx * width / 2.0
    return (
        (cx + lx + wx, cy + ly + wy),
        (cx + lx - wx, cy + ly - wy),
        (cx - lx - wx, cy - ly - wy),
        (cx - lx + wx, cy - ly + wy),
    )


def _separated(axis_x: float, axis_y: float, corners_a, corners_b) -> bool:
    amin = amax = corners_a[0][0] * axis_x + corners_a[0][1] * axis_y
    for px, py in corners_a[1:]:
        p = px * axis_x + py * axis_y
        if p < amin:
            amin = p
        elif p > amax:
            amax = p
    bmin = bmax = corners_b[0][0] * axis_x + corners_b[0][1] * axis_y
    for px, py in corners_b[1:]:
        p = px * axis_x + py * axis_y
        if p < bmin:
            bmin = p
        elif p > bmax:
            bmax = p
    return amax < bmin or bmax < amin


def rects_overlap(corners_a, heading_a, corners_b, heading_b) -> bool:
    """Separating-axis test; headings are the rectangles' unit long axes."""
    hax, hay = heading_a
    hbx, hby = heading_b
    for ax, ay in ((hax, hay), (-hay, hax), (hbx, hby), (-hby, hbx)):
        if _separated(ax, ay, corners_a, corners_b):
            return False
    return True


class VehicleFootprint:
    """Precomputed rectangle for one vehicle at one step."""

    __slots__ = ("cx", "cy", "heading", "corners", "radius")

    def __init__(self, cx: float, cy: float, hx: float, hy: float, length: float, width: float):
        self.cx = cx
        self.cy = cy
        self.heading = (hx, hy)
        self.corners = rect_corners(cx, cy, hx, hy, length, width)
        self.radius = math.hypot(length, width) / 2.0

    def overlaps(self, other: "VehicleFootprint") -> bool:
        dx = self.cx - other.cx
        dy = self.cy - other.cy
        reach = self.radius + other.radius
        if dx * dx + dy * dy > reach * reach:
            return False
        return rects_overlap(self.corners, self.heading, other.corners, other.heading)
