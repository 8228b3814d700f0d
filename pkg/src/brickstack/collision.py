"""Overlap, penetration, and distance queries for oriented boxes.

SAT over the 15 candidate axes gives exact boolean overlap plus a face-contact
penetration depth and normal. Distances between separated boxes come from a
GJK iteration on the corner sets. A few 2D helpers (rectangle SAT, convex
hull, polygon clipping) support footprint and support-polygon reasoning.
"""

import math

import numpy as np

from .geometry import Obb

_AXIS_EPS = 1e-9


def sat_query(a: Obb, b: Obb) -> tuple[float, np.ndarray]:
    """Signed separation between two boxes.

    Returns (gap, normal). gap > 0 means the boxes are separated by at least
    gap along the best axis (a lower bound on their true distance); gap <= 0
    means they overlap with penetration depth -gap along `normal`, which is
    oriented from `a` toward `b`.
    """
    ra = a.axes()
    rb = b.axes()
    d = b.center - a.center
    axes = [ra[:, i] for i in range(3)] + [rb[:, i] for i in range(3)]
    for i in range(3):
        for j in range(3):
            cr = np.cross(ra[:, i], rb[:, j])
            n = np.linalg.norm(cr)
            if n > _AXIS_EPS:
                axes.append(cr / n)
    best_gap = -math.inf
    min_overlap = math.inf
    normal = np.array([0.0, 0.0, 1.0])
    for axis in axes:
        proj_a = float(np.abs(axis @ ra) @ a.half_extents)
        proj_b = float(np.abs(axis @ rb) @ b.half_extents)
        dist = float(axis @ d)
        gap = abs(dist) - (proj_a + proj_b)
        if gap > best_gap:
            best_gap = gap
        if gap <= 0.0 and -gap < min_overlap:
            min_overlap = -gap
            normal = axis if dist >= 0.0 else -axis
    if best_gap > 0.0:
        return best_gap, normal
    return -min_overlap, normal


def obb_overlap(a: Obb, b: Obb, tol: float = 0.0) -> bool:
    """True iff the boxes interpenetrate by more than tol."""
    gap, _ = sat_query(a, b)
    return gap < -tol


def box_arrays(boxes: list) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack boxes into (centers, rotation matrices, half extents) for batching."""
    n = len(boxes)
    if n == 0:
        return np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3))
    centers = np.array([b.center for b in boxes])
    rots = np.array([b.axes() for b in boxes])
    halfs = np.array([b.half_extents for b in boxes])
    return centers, rots, halfs


def sat_signed_gaps(box: Obb, centers: np.ndarray, rots: np.ndarray,
                    halfs: np.ndarray) -> np.ndarray:
    """Signed SAT separation of one box against N boxes, vectorized.

    Positive entries are certified lower bounds on the pairwise distance;
    negative entries are the (negated) face-contact penetration depth.
    """
    n = len(centers)
    if n == 0:
        return np.zeros(0)
    ra = box.axes()
    a_axes = ra.T                                      # (3, 3) rows are axes
    b_axes = rots.transpose(0, 2, 1)                   # (N, 3, 3) rows are axes
    crosses = np.cross(a_axes[None, :, None, :], b_axes[:, None, :, :]).reshape(n, 9, 3)
    cn = np.linalg.norm(crosses, axis=2)
    valid = cn > _AXIS_EPS
    crosses = np.where(valid[..., None], crosses / np.maximum(cn[..., None], 1e-30), 0.0)
    axes = np.concatenate([np.broadcast_to(a_axes, (n, 3, 3)), b_axes, crosses], axis=1)
    d = centers - box.center
    dist = np.abs(np.einsum("nkj,nj->nk", axes, d))
    proj_a = np.abs(axes @ ra) @ box.half_extents
    proj_b = np.einsum("nki,ni->nk", np.abs(np.einsum("nkj,nji->nki", axes, rots)), halfs)
    gaps = dist - (proj_a + proj_b)
    mask = np.ones((n, 15), dtype=bool)
    mask[:, 6:] = valid
    gaps = np.where(mask, gaps, -np.inf)
    return gaps.max(axis=1)


def penetration_depth(a: Obb, b: Obb) -> float:
    gap, _ = sat_query(a, b)
    return max(0.0, -gap)


# ---------------------------------------------------------------------------
# GJK distance between convex corner sets.
# ---------------------------------------------------------------------------


def _closest_on_segment(a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        return a, [a]
    t = -float(a @ ab) / denom
    if t <= 0.0:
        return a, [a]
    if t >= 1.0:
        return b, [b]
    return a + t * ab, [a, b]


def _closest_on_triangle(a, b, c):
    ab = b - a
    ac = c - a
    ap = -a
    d1 = float(ab @ ap)
    d2 = float(ac @ ap)
    if d1 <= 0.0 and d2 <= 0.0:
        return a, [a]
    bp = -b
    d3 = float(ab @ bp)
    d4 = float(ac @ bp)
    if d3 >= 0.0 and d4 <= d3:
        return b, [b]
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3) if d1 != d3 else 0.0
        return a + t * ab, [a, b]
    cp = -c
    d5 = float(ab @ cp)
    d6 = float(ac @ cp)
    if d6 >= 0.0 and d5 <= d6:
        return c, [c]
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6) if d2 != d6 else 0.0
        return a + t * ac, [a, c]
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + t * (c - b), [b, c]
    denom = va + vb + vc
    v = vb / denom
    w = vc / denom
    return a + ab * v + ac * w, [a, b, c]


def _origin_in_tetra(a, b, c, d) -> bool:
    def same_side(p1, p2, p3, p4) -> bool:
        n = np.cross(p2 - p1, p3 - p1)
        ref = float(n @ (p4 - p1))
        val = float(n @ (-p1))
        return ref * val >= -1e-15

    return (
        same_side(a, b, c, d)
        and same_side(b, c, d, a)
        and same_side(c, d, a, b)
        and same_side(d, a, b, c)
    )


def _closest_on_simplex(simplex: list[np.ndarray]):
    if len(simplex) == 1:
        return simplex[0], [simplex[0]]
    if len(simplex) == 2:
        return _closest_on_segment(simplex[0], simplex[1])
    if len(simplex) == 3:
        return _closest_on_triangle(simplex[0], simplex[1], simplex[2])
    a, b, c, d = simplex
    if _origin_in_tetra(a, b, c, d):
        return np.zeros(3), simplex
    best = None
    for tri in ((a, b, c), (a, b, d), (a, c, d), (b, c, d)):
        p, sub = _closest_on_triangle(*tri)
        n = float(p @ p)
        if best is None or n < best[0]:
            best = (n, p, sub)
    return best[1], best[2]


def points_distance(pts_a: np.ndarray, pts_b: np.ndarray, tol: float = 1e-10) -> float:
    """Distance between the convex hulls of two point sets (0 when they meet)."""

    def support(direction):
        ia = int(np.argmax(pts_a @ direction))
        ib = int(np.argmin(pts_b @ direction))
        return pts_a[ia] - pts_b[ib]

    v = support(np.array([1.0, 0.0, 0.0]))
    simplex = [v]
    for _ in range(64):
        vn = float(np.linalg.norm(v))
        if vn < 1e-12:
            return 0.0
        w = support(-v)
        if vn * vn - float(v @ w) <= tol * vn:
            return vn
        if any(np.linalg.norm(w - s) < 1e-14 for s in simplex):
            return vn
        simplex.append(w)
        v, simplex = _closest_on_simplex(simplex)
        if len(simplex) == 4:
            return 0.0
    return float(np.linalg.norm(v))


def obb_distance(a: Obb, b: Obb) -> float:
    """Minimum distance between two boxes; 0 when touching or overlapping."""
    gap, _ = sat_query(a, b)
    if gap <= 0.0:
        return 0.0
    return points_distance(a.corners(), b.corners())


# ---------------------------------------------------------------------------
# 2D helpers (all take (N, 2) arrays or 2-vectors).
# ---------------------------------------------------------------------------


def rect_corners_2d(center, yaw: float, half) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s], [s, c]])
    signs = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
    return np.asarray(center, dtype=float) + (signs * np.asarray(half, dtype=float)) @ rot.T


def _rect_axes(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, s], [-s, c]])


def rects_overlap_2d(c1, yaw1, h1, c2, yaw2, h2, margin: float = 0.0) -> bool:
    """SAT test for two yawed rectangles, inflated by margin."""
    a1 = _rect_axes(yaw1)
    a2 = _rect_axes(yaw2)
    h1 = np.asarray(h1, dtype=float)
    h2 = np.asarray(h2, dtype=float)
    d = np.asarray(c2, dtype=float) - np.asarray(c1, dtype=float)
    for axis in (*a1, *a2):
        r1 = float(np.abs(a1 @ axis) @ h1)
        r2 = float(np.abs(a2 @ axis) @ h2)
        if abs(float(axis @ d)) > r1 + r2 + margin:
            return False
    return True


def convex_hull_2d(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise convex hull (monotone chain)."""
    pts = np.unique(np.round(np.asarray(points, dtype=float), 12), axis=0)
    if len(pts) <= 2:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def clip_polygon_2d(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of `subject` by convex CCW polygon `clip`."""
    output = [np.asarray(p, dtype=float) for p in subject]
    m = len(clip)
    for i in range(m):
        a = clip[i]
        b = clip[(i + 1) % m]
        edge = b - a
        if not output:
            return np.zeros((0, 2))
        inputs = output
        output = []
        s = inputs[-1]
        for e in inputs:
            s_in = edge[0] * (s[1] - a[1]) - edge[1] * (s[0] - a[0]) >= -1e-12
            e_in = edge[0] * (e[1] - a[1]) - edge[1] * (e[0] - a[0]) >= -1e-12
            if e_in:
                if not s_in:
                    output.append(_seg_intersect_2d(s, e, a, b))
                output.append(e)
            elif s_in:
                output.append(_seg_intersect_2d(s, e, a, b))
            s = e
    return np.array(output) if output else np.zeros((0, 2))


def _seg_intersect_2d(p1, p2, a, b):
    d1 = p2 - p1
    d2 = b - a
    denom = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(denom) < 1e-15:
        return p2
    t = ((a[0] - p1[0]) * d2[1] - (a[1] - p1[1]) * d2[0]) / denom
    return p1 + t * d1


def polygon_area_2d(pts: np.ndarray) -> float:
    if len(pts) < 3:
        return 0.0
    x = pts[:, 0]
    y = pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, 1)) - np.dot(y, np.roll(x, 1))))


def point_in_hull_margin(point, hull: np.ndarray, margin: float = 0.0) -> bool:
    """True iff point lies inside the CCW hull with at least `margin` slack.

    Returns the most conservative answer for degenerate hulls (< 3 vertices).
    """
    if len(hull) < 3:
        return False
    p = np.asarray(point, dtype=float)
    m = len(hull)
    for i in range(m):
        a = hull[i]
        b = hull[(i + 1) % m]
        edge = b - a
        n = np.linalg.norm(edge)
        if n < 1e-12:
            continue
        # Inward distance from edge line for CCW polygons.
        d = (edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])) / n
        if d < margin:
            return False
    return True
