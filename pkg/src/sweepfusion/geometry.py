"""2-D geometry primitives for oriented boxes: corners, hulls, clipping.

Everything here works on plain float64 arrays; the box dataclass lives in
:mod:`sweepfusion.scene`.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DegenerateGeometryError


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


def box_corners(cx: float, cy: float, length: float, width: float, yaw: float) -> np.ndarray:
    """Counter-clockwise corners of an oriented rectangle, shape (4, 2).

    The length axis points along ``yaw``.
    """
    hl, hw = 0.5 * length, 0.5 * width
    c, s = math.cos(yaw), math.sin(yaw)
    local = np.array(
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]], dtype=np.float64
    )
    rot = np.array([[c, -s], [s, c]], dtype=np.float64)
    return local @ rot.T + np.array([cx, cy])


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise order)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Clip ``subject`` by a convex counter-clockwise ``clipper`` polygon.

    Sutherland-Hodgman: the subject is cut by each clip edge's half plane in
    turn.  Returns the (possibly empty) intersection polygon.
    """
    output = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if len(output) < 3:
            return np.empty((0, 2), dtype=np.float64)
        px, py = clipper[i]
        qx, qy = clipper[(i + 1) % n]
        ex, ey = qx - px, qy - py
        inp = output
        output = []
        prev = inp[-1]
        prev_side = ex * (prev[1] - py) - ey * (prev[0] - px)
        for cur in inp:
            side = ex * (cur[1] - py) - ey * (cur[0] - px)
            if side >= 0.0:
                if prev_side < 0.0:
                    t = prev_side / (prev_side - side)
                    output.append(
                        (prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1]))
                    )
                output.append(cur)
            elif prev_side >= 0.0:
                t = prev_side / (prev_side - side)
                output.append(
                    (prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1]))
                )
            prev, prev_side = cur, side
    if len(output) < 3:
        return np.empty((0, 2), dtype=np.float64)
    return np.asarray(output, dtype=np.float64)


def intersection_area(corners_a: np.ndarray, corners_b: np.ndarray) -> float:
    inter = clip_polygon(corners_a, corners_b)
    if len(inter) < 3:
        return 0.0
    return abs(polygon_area(inter))


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise convex hull (Andrew monotone chain).

    Collinear boundary points are dropped.  Raises for fewer than 3 distinct
    non-collinear input points.
    """
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if len(pts) < 3:
        raise DegenerateGeometryError("convex hull needs >= 3 distinct points")
    # unique() sorts lexicographically, which is what the chain scan needs
    def half(seq):
        out: list[np.ndarray] = []
        for p in seq:
            while len(out) >= 2:
                ox, oy = out[-2]
                ax, ay = out[-1]
                if (ax - ox) * (p[1] - oy) - (ay - oy) * (p[0] - ox) <= 0.0:
                    out.pop()
                else:
                    break
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    hull = np.asarray(lower[:-1] + upper[:-1], dtype=np.float64)
    if len(hull) < 3:
        raise DegenerateGeometryError("input points are collinear")
    return hull


def min_area_rect(points: np.ndarray) -> tuple[float, float, float, float, float]:
    """Minimum-area enclosing rectangle of a point set.

    Rotating calipers over convex hull edges: the optimal rectangle is
    aligned with some hull edge.  Returns ``(cx, cy, length, width, yaw)``
    with ``length >= width`` and ``yaw`` (heading of the length axis)
    normalized to (-pi/2, pi/2].
    """
    hull = convex_hull(points)
    edges = np.diff(np.vstack([hull, hull[:1]]), axis=0)
    angles = np.arctan2(edges[:, 1], edges[:, 0])

    best = None
    for theta in angles:
        c, s = math.cos(theta), math.sin(theta)
        u = hull[:, 0] * c + hull[:, 1] * s
        v = -hull[:, 0] * s + hull[:, 1] * c
        u0, u1 = float(u.min()), float(u.max())
        v0, v1 = float(v.min()), float(v.max())
        area = (u1 - u0) * (v1 - v0)
        if best is None or area < best[0]:
            best = (area, theta, u0, u1, v0, v1)

    _, theta, u0, u1, v0, v1 = best
    du, dv = u1 - u0, v1 - v0
    cu, cv = 0.5 * (u0 + u1), 0.5 * (v0 + v1)
    c, s = math.cos(theta), math.sin(theta)
    cx = cu * c - cv * s
    cy = cu * s + cv * c
    if du >= dv:
        length, width, yaw = du, dv, theta
    else:
        length, width, yaw = dv, du, theta + 0.5 * math.pi
    yaw = wrap_angle(yaw)
    if yaw <= -0.5 * math.pi:
        yaw += math.pi
    elif yaw > 0.5 * math.pi:
        yaw -= math.pi
    return float(cx), float(cy), float(length), float(width), float(yaw)


def longest_hull_edge(points: np.ndarray) -> tuple[float, float]:
    """Direction angle and length of the longest convex-hull edge."""
    hull = convex_hull(points)
    edges = np.diff(np.vstack([hull, hull[:1]]), axis=0)
    lengths = np.hypot(edges[:, 0], edges[:, 1])
    k = int(np.argmax(lengths))
    return float(np.arctan2(edges[k, 1], edges[k, 0])), float(lengths[k])


def rect_at_yaw(points: np.ndarray, yaw: float) -> tuple[float, float, float, float, float]:
    """Tightest rectangle over ``points`` whose length axis points at ``yaw``.

    Returns ``(cx, cy, length, width, yaw)`` with ``length >= width`` (the
    yaw is rotated a quarter turn if the cross extent dominates) and the yaw
    normalized to (-pi/2, pi/2].
    """
    c, s = math.cos(yaw), math.sin(yaw)
    u = points[:, 0] * c + points[:, 1] * s
    v = -points[:, 0] * s + points[:, 1] * c
    u0, u1 = float(u.min()), float(u.max())
    v0, v1 = float(v.min()), float(v.max())
    cu, cv = 0.5 * (u0 + u1), 0.5 * (v0 + v1)
    cx = cu * c - cv * s
    cy = cu * s + cv * c
    du, dv = u1 - u0, v1 - v0
    if du >= dv:
        length, width, out_yaw = du, dv, yaw
    else:
        length, width, out_yaw = dv, du, yaw + 0.5 * math.pi
    out_yaw = wrap_angle(out_yaw)
    if out_yaw <= -0.5 * math.pi:
        out_yaw += math.pi
    elif out_yaw > 0.5 * math.pi:
        out_yaw -= math.pi
    return float(cx), float(cy), float(length), float(width), out_yaw


def points_in_box(
    points: np.ndarray,
    cx: float,
    cy: float,
    length: float,
    width: float,
    yaw: float,
    pad: float = 0.0,
) -> np.ndarray:
    """Boolean mask of points inside an oriented rectangle (inclusive)."""
    c, s = math.cos(yaw), math.sin(yaw)
    dx = points[:, 0] - cx
    dy = points[:, 1] - cy
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (np.abs(u) <= 0.5 * length + pad) & (np.abs(v) <= 0.5 * width + pad)
