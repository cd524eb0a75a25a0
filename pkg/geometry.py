"""
Planar geometry shared by the arena and the Consequence Engine.

All functions accept scalars or numpy arrays and broadcast, so the world
simulator (one robot at a time) and the internal model (all candidate
actions at once) run the same kinematics and contact code.
"""

import math

import numpy as np
from scipy.spatial.distance import pdist

TWO_PI = 2.0 * math.pi

# Below this turn rate a motion step is integrated as a straight line
STRAIGHT_W = 1e-9

# Contact tolerance used by the sweep tests
CONTACT_EPS = 1e-12


def wrap_angle(theta):
    """Normalise an angle (or array of angles) to [-pi, pi)."""
    wrapped = np.mod(np.asarray(theta, dtype=float) + math.pi, TWO_PI) - math.pi
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def integrate_unicycle(x, y, theta, v, w, dt):
    """
    Advance unicycle poses by one step of length dt.

    Constant (v, w) over the step is integrated exactly: pure rotations and
    straight lines are exact, everything else follows the circular arc.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)

    straight = np.abs(w) < STRAIGHT_W
    w_safe = np.where(straight, 1.0, w)
    theta_new = theta + w * dt

    dx_arc = v / w_safe * (np.sin(theta_new) - np.sin(theta))
    dy_arc = -v / w_safe * (np.cos(theta_new) - np.cos(theta))
    dx_line = v * dt * np.cos(theta)
    dy_line = v * dt * np.sin(theta)

    x_new = x + np.where(straight, dx_line, dx_arc)
    y_new = y + np.where(straight, dy_line, dy_arc)
    theta_new = np.mod(theta_new + math.pi, TWO_PI) - math.pi
    return x_new, y_new, theta_new


def point_segment_distance(px, py, ax, ay, bx, by):
    """Distance from point(s) P to segment AB, plus the closest point."""
    px = np.asarray(px, dtype=float)
    py = np.asarray(py, dtype=float)
    abx, aby = bx - ax, by - ay
    length_sq = abx * abx + aby * aby
    if length_sq == 0.0:
        t = np.zeros_like(px)
    else:
        t = np.clip(((px - ax) * abx + (py - ay) * aby) / length_sq, 0.0, 1.0)
    cx = ax + t * abx
    cy = ay + t * aby
    return np.hypot(px - cx, py - cy), cx, cy


def _sweep_point_circle(px, py, dx, dy, cx, cy, radius):
    """
    Smallest s in [0, 1] at which P + s*D enters the disc (C, radius).

    Returns inf where the motion never enters. Points already inside the
    disc return 0 only when they are moving further in.
    """
    ox, oy = px - cx, py - cy
    a = dx * dx + dy * dy
    b = 2.0 * (dx * ox + dy * oy)
    c = ox * ox + oy * oy - radius * radius

    inside = c <= CONTACT_EPS
    approaching = b < 0.0

    disc = b * b - 4.0 * a * c
    a_safe = np.where(a > 0.0, a, 1.0)
    root = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a_safe)
    hit = (a > 0.0) & (disc >= 0.0) & approaching & (root >= 0.0) & (root <= 1.0)

    s = np.where(hit, root, np.inf)
    s = np.where(inside, np.where(approaching, 0.0, np.inf), s)
    return s


def sweep_circle_segment(px, py, dx, dy, radius, ax, ay, bx, by):
    """
    Time of impact of circles of `radius` centred at P moving by D against
    the segment AB, as a fraction s of the displacement (inf = no contact).
    """
    px = np.asarray(px, dtype=float)
    py = np.asarray(py, dtype=float)
    dx = np.asarray(dx, dtype=float)
    dy = np.asarray(dy, dtype=float)

    abx, aby = bx - ax, by - ay
    length = math.hypot(abx, aby)

    dist0, cx, cy = point_segment_distance(px, py, ax, ay, bx, by)
    inside = dist0 <= radius + CONTACT_EPS
    moving_in = (dx * (px - cx) + dy * (py - cy)) < 0.0

    best = np.full(np.broadcast(px, dx).shape, np.inf)

    if length > 0.0:
        ux, uy = abx / length, aby / length
        nx, ny = -uy, ux
        h0 = (px - ax) * nx + (py - ay) * ny
        hd = dx * nx + dy * ny
        hd_safe = np.where(hd != 0.0, hd, 1.0)
        for side in (1.0, -1.0):
            s = (side * radius - h0) / hd_safe
            qx = px + s * dx
            qy = py + s * dy
            along = (qx - ax) * ux + (qy - ay) * uy
            ok = (
                (hd != 0.0)
                & (side * hd < 0.0)
                & (s >= 0.0)
                & (s <= 1.0)
                & (along >= 0.0)
                & (along <= length)
            )
            best = np.minimum(best, np.where(ok, s, np.inf))

    for ex, ey in ((ax, ay), (bx, by)):
        best = np.minimum(best, _sweep_point_circle(px, py, dx, dy, ex, ey, radius))

    best = np.where(inside, np.where(moving_in, 0.0, np.inf), best)
    return best


def sweep_circle_circle(px, py, dx, dy, cx, cy, radius_sum):
    """Time of impact of a moving circle against a static one (radii summed)."""
    return _sweep_point_circle(
        np.asarray(px, dtype=float),
        np.asarray(py, dtype=float),
        np.asarray(dx, dtype=float),
        np.asarray(dy, dtype=float),
        cx,
        cy,
        radius_sum,
    )


def ray_segment_distance(ox, oy, ux, uy, ax, ay, bx, by):
    """Distance along the unit ray O + t*U to segment AB (inf if missed)."""
    ex, ey = bx - ax, by - ay
    denom = ux * ey - uy * ex
    if abs(denom) < 1e-15:
        return math.inf
    wx, wy = ax - ox, ay - oy
    t = (wx * ey - wy * ex) / denom
    s = (wx * uy - wy * ux) / denom
    if t >= 0.0 and 0.0 <= s <= 1.0:
        return t
    return math.inf


def ray_circle_distance(ox, oy, ux, uy, cx, cy, radius):
    """Distance along the unit ray O + t*U to the circle boundary (inf if missed)."""
    fx, fy = ox - cx, oy - cy
    b = fx * ux + fy * uy
    c = fx * fx + fy * fy - radius * radius
    disc = b * b - c
    if disc < 0.0:
        return math.inf
    root = math.sqrt(disc)
    t = -b - root
    if t >= 0.0:
        return t
    t = -b + root
    if t >= 0.0 and c > 0.0:
        return t
    return 0.0 if c <= 0.0 else math.inf


def segment_circle_intersects(ax, ay, bx, by, cx, cy, radius):
    """True if segment AB passes within `radius` of C."""
    dist, _, _ = point_segment_distance(cx, cy, ax, ay, bx, by)
    return bool(dist < radius)


def segments_intersect(p1, p2, q1, q2):
    """Proper or touching intersection of segments p1p2 and q1q2."""

    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    return (d1 * d2 <= 0.0) and (d3 * d4 <= 0.0) and not (d1 == d2 == d3 == d4 == 0.0)


def polyline_length(points):
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        return 0.0
    return float(np.sum(np.hypot(*np.diff(points, axis=0).T)))


def resample_polyline(points, n_points):
    """Resample a polyline at n_points positions uniform in arc length."""
    points = np.asarray(points, dtype=float)
    if len(points) == 1:
        return np.repeat(points, n_points, axis=0)
    steps = np.hypot(*np.diff(points, axis=0).T)
    cumulative = np.concatenate([[0.0], np.cumsum(steps)])
    total = cumulative[-1]
    if total == 0.0:
        return np.repeat(points[:1], n_points, axis=0)
    targets = np.linspace(0.0, total, n_points)
    xs = np.interp(targets, cumulative, points[:, 0])
    ys = np.interp(targets, cumulative, points[:, 1])
    return np.column_stack([xs, ys])


def polyline_diameter(points):
    """Largest distance between any two vertices of a polyline."""
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        return 0.0
    return float(pdist(points).max())


def _circle_from(a, b, c=None):
    if c is None:
        centre = (a + b) / 2.0
        return centre, float(np.hypot(*(a - centre)))
    bx, by = b - a
    cx, cy = c - a
    d = 2.0 * (bx * cy - by * cx)
    if abs(d) < 1e-15:
        # collinear: the widest pair spans the circle
        pairs = ((a, b), (a, c), (b, c))
        return _circle_from(*max(pairs, key=lambda p: np.hypot(*(p[0] - p[1]))))
    ux = (cy * (bx * bx + by * by) - by * (cx * cx + cy * cy)) / d
    uy = (bx * (cx * cx + cy * cy) - cx * (bx * bx + by * by)) / d
    return a + np.array([ux, uy]), float(np.hypot(ux, uy))


def enclosing_circle(points):
    """
    Smallest circle containing every point, as (centre, radius).

    Incremental construction in input order, so the result is deterministic.
    """
    points = np.unique(np.asarray(points, dtype=float).reshape(-1, 2), axis=0)
    if len(points) == 0:
        raise ValueError("Need at least one point")

    def inside(centre, radius, p):
        return np.hypot(*(p - centre)) <= radius * (1.0 + 1e-9) + 1e-12

    centre, radius = points[0], 0.0
    for i in range(1, len(points)):
        if inside(centre, radius, points[i]):
            continue
        centre, radius = points[i], 0.0
        for j in range(i):
            if inside(centre, radius, points[j]):
                continue
            centre, radius = _circle_from(points[i], points[j])
            for k in range(j):
                if not inside(centre, radius, points[k]):
                    centre, radius = _circle_from(points[i], points[j], points[k])
    return centre, radius


def bounding_circle_diameter(points):
    """Diameter of the smallest circle around a polyline's vertices."""
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        return 0.0
    return 2.0 * enclosing_circle(points)[1]
