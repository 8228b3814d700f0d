"""SE(3) primitives: rotations, rigid poses, oriented boxes, and box-overlap metrics.

Rotations are stored as unit quaternions canonicalized to w >= 0 so every
orientation has exactly one representation. All values are immutable; all
operations are pure functions of their inputs.
"""

import math

import numpy as np

_NORM_TOL = 1e-9


def _canonical(q: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(q))
    if n < 1e-12:
        raise ValueError("zero-norm quaternion")
    q = q / n
    if q[0] < 0.0:
        q = -q
    elif q[0] == 0.0:
        for c in q[1:]:
            if c != 0.0:
                if c < 0.0:
                    q = -q
                break
    return q


class Rotation:
    """Unit quaternion (w, x, y, z) with w >= 0."""

    __slots__ = ("q",)

    def __init__(self, w: float, x: float, y: float, z: float):
        q = _canonical(np.array([w, x, y, z], dtype=float))
        q.flags.writeable = False
        self.q = q

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_quat(cls, q) -> "Rotation":
        return cls(q[0], q[1], q[2], q[3])

    @classmethod
    def from_axis_angle(cls, axis, angle_rad: float) -> "Rotation":
        axis = np.asarray(axis, dtype=float)
        n = float(np.linalg.norm(axis))
        if n < 1e-12:
            raise ValueError("zero axis")
        half = 0.5 * angle_rad
        s = math.sin(half) / n
        return cls(math.cos(half), axis[0] * s, axis[1] * s, axis[2] * s)

    @classmethod
    def from_yaw(cls, yaw_rad: float) -> "Rotation":
        return cls(math.cos(0.5 * yaw_rad), 0.0, 0.0, math.sin(0.5 * yaw_rad))

    def matrix(self) -> np.ndarray:
        w, x, y, z = self.q
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def apply(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        u = self.q[1:]
        w = self.q[0]
        t = 2.0 * np.cross(u, v)
        return v + w * t + np.cross(u, t)

    def __mul__(self, other: "Rotation") -> "Rotation":
        w1, x1, y1, z1 = self.q
        w2, x2, y2, z2 = other.q
        return Rotation(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def inverse(self) -> "Rotation":
        w, x, y, z = self.q
        return Rotation(w, -x, -y, -z)

    def yaw(self) -> float:
        """Heading about +z (ZYX convention), radians in (-pi, pi]."""
        m = self.matrix()
        return math.atan2(m[1, 0], m[0, 0])

    def angle_rad_to(self, other: "Rotation") -> float:
        d = abs(float(np.dot(self.q, other.q)))
        return 2.0 * math.acos(min(1.0, d))

    def almost_equal(self, other: "Rotation", tol: float = _NORM_TOL) -> bool:
        return self.angle_rad_to(other) <= tol

    def tolist(self) -> list:
        return [float(c) for c in self.q]

    def __repr__(self) -> str:
        return "Rotation(w=%.9g, x=%.9g, y=%.9g, z=%.9g)" % tuple(self.q)


class Pose:
    """Rigid transform: rotation followed by translation (meters)."""

    __slots__ = ("t", "r")

    def __init__(self, translation, rotation: Rotation | None = None):
        t = np.array(translation, dtype=float).reshape(3)
        t.flags.writeable = False
        self.t = t
        self.r = rotation if rotation is not None else Rotation.identity()

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3))

    @classmethod
    def from_xyz_yaw(cls, x: float, y: float, z: float, yaw_rad: float = 0.0) -> "Pose":
        return cls(np.array([x, y, z]), Rotation.from_yaw(yaw_rad))

    def __mul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def inverse(self) -> "Pose":
        rinv = self.r.inverse()
        return Pose(-rinv.apply(self.t), rinv)

    def apply(self, point) -> np.ndarray:
        return self.r.apply(point) + self.t

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.r.matrix()
        m[:3, 3] = self.t
        return m

    def to_jsonable(self) -> dict:
        return {"t": [float(v) for v in self.t], "q": self.r.tolist()}

    @classmethod
    def from_jsonable(cls, d: dict) -> "Pose":
        return cls(d["t"], Rotation.from_quat(d["q"]))

    def __repr__(self) -> str:
        return "Pose(t=%s, %r)" % (np.array2string(self.t, precision=6), self.r)


def compose(a: Pose, b: Pose) -> Pose:
    """Composition a . b: apply b first, then a."""
    return Pose(a.t + a.r.apply(b.t), a.r * b.r)


def pose_gap(a: Pose, b: Pose) -> tuple[float, float]:
    """(translation distance m, rotation angle deg) between two poses."""
    return float(np.linalg.norm(a.t - b.t)), math.degrees(a.r.angle_rad_to(b.r))


def rotation_error_deg(r: Rotation, r_star: Rotation) -> float:
    """Geodesic distance on SO(3) in degrees via the rotation-matrix trace.

    The trace argument is clamped to [-1, 1] so near-identical inputs cannot
    produce NaN from floating-point excess.
    """
    m = r.matrix()
    m_star = r_star.matrix()
    tr = float(np.trace(m_star.T @ m))
    c = min(1.0, max(-1.0, 0.5 * (tr - 1.0)))
    return math.degrees(math.acos(c))


def center_offset(c, c_star) -> float:
    """Euclidean distance between two centers, meters."""
    return float(np.linalg.norm(np.asarray(c, dtype=float) - np.asarray(c_star, dtype=float)))


def interpolate_pose(start: Pose, end: Pose, s: float) -> Pose:
    """Blend two poses: affine translation, shortest-arc spherical rotation.

    s=0 returns start exactly, s=1 returns end exactly.
    """
    if not 0.0 <= s <= 1.0:
        raise ValueError("interpolation ratio must be in [0, 1]")
    t = (1.0 - s) * start.t + s * end.t
    return Pose(t, _slerp(start.r, end.r, s))


def _slerp(a: Rotation, b: Rotation, s: float) -> Rotation:
    qa = a.q
    qb = b.q
    dot = float(np.dot(qa, qb))
    if dot < 0.0:
        qb = -qb
        dot = -dot
    if dot > 1.0 - 1e-12:
        q = (1.0 - s) * qa + s * qb
        return Rotation.from_quat(q / np.linalg.norm(q))
    theta = math.acos(min(1.0, dot))
    sin_theta = math.sin(theta)
    w0 = math.sin((1.0 - s) * theta) / sin_theta
    w1 = math.sin(s * theta) / sin_theta
    return Rotation.from_quat(w0 * qa + w1 * qb)


class Obb:
    """Oriented box: center (m), rotation, strictly positive half extents (m)."""

    __slots__ = ("center", "rotation", "half_extents")

    def __init__(self, center, rotation: Rotation, half_extents):
        c = np.array(center, dtype=float).reshape(3)
        h = np.array(half_extents, dtype=float).reshape(3)
        if np.any(h <= 0.0):
            raise ValueError("half extents must be strictly positive")
        c.flags.writeable = False
        h.flags.writeable = False
        self.center = c
        self.rotation = rotation
        self.half_extents = h

    @property
    def volume(self) -> float:
        return float(8.0 * np.prod(self.half_extents))

    def axes(self) -> np.ndarray:
        """Columns are the box's local axes in world frame."""
        return self.rotation.matrix()

    def corners(self) -> np.ndarray:
        """All 8 corners, shape (8, 3)."""
        signs = np.array(
            [
                [-1, -1, -1],
                [+1, -1, -1],
                [+1, +1, -1],
                [-1, +1, -1],
                [-1, -1, +1],
                [+1, -1, +1],
                [+1, +1, +1],
                [-1, +1, +1],
            ],
            dtype=float,
        )
        return self.center + (signs * self.half_extents) @ self.axes().T

    def contains_points(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        """Vectorized membership test for an (N, 3) array of points."""
        local = (np.asarray(points, dtype=float) - self.center) @ self.axes()
        return np.all(np.abs(local) <= self.half_extents + tol, axis=1)

    def __repr__(self) -> str:
        return "Obb(center=%s, half=%s)" % (
            np.array2string(self.center, precision=4),
            np.array2string(self.half_extents, precision=4),
        )


# ---------------------------------------------------------------------------
# Exact OBB intersection volume via successive half-space clipping.
#
# Box A's boundary is kept as a list of convex polygonal faces. Each of box
# B's six face planes clips every face (Sutherland-Hodgman in 3D); the cut
# points left on the plane are reassembled into a convex "cap" polygon that
# closes the polytope again. The result is convex, so its volume follows from
# a tetrahedral fan around the vertex centroid.
# ---------------------------------------------------------------------------

_PLANE_TOL = 1e-12


def _box_faces(box: Obb) -> list[np.ndarray]:
    c = box.corners()
    # Corner indices per face, each loop ordered around the face.
    loops = [
        (0, 1, 2, 3),  # -z
        (4, 5, 6, 7),  # +z
        (0, 1, 5, 4),  # -y
        (3, 2, 6, 7),  # +y
        (0, 3, 7, 4),  # -x
        (1, 2, 6, 5),  # +x
    ]
    return [c[list(loop)] for loop in loops]


def _half_spaces(box: Obb) -> list[tuple[np.ndarray, float]]:
    axes = box.axes()
    planes = []
    for k in range(3):
        n = axes[:, k]
        d0 = float(n @ box.center)
        h = float(box.half_extents[k])
        planes.append((n, d0 + h))    # n.x <= d0 + h
        planes.append((-n, -(d0 - h)))  # n.x >= d0 - h
    return planes


def _clip_face(face: np.ndarray, n: np.ndarray, d: float):
    """Clip one polygon against n.x <= d; returns (kept polygon, cut points)."""
    kept: list[np.ndarray] = []
    cuts: list[np.ndarray] = []
    m = len(face)
    dist = face @ n - d
    for i in range(m):
        a, b = face[i], face[(i + 1) % m]
        da, db = dist[i], dist[(i + 1) % m]
        a_in = da <= _PLANE_TOL
        b_in = db <= _PLANE_TOL
        if a_in:
            kept.append(a)
        if a_in != b_in:
            t = da / (da - db)
            p = a + t * (b - a)
            kept.append(p)
            cuts.append(p)
    return kept, cuts


def _assemble_cap(points: list[np.ndarray], n: np.ndarray) -> np.ndarray | None:
    if len(points) < 3:
        return None
    uniq: list[np.ndarray] = []
    for p in points:
        if all(np.linalg.norm(p - q) > 1e-9 for q in uniq):
            uniq.append(p)
    if len(uniq) < 3:
        return None
    pts = np.array(uniq)
    centroid = pts.mean(axis=0)
    # In-plane basis for angular ordering.
    u = np.cross(n, [1.0, 0.0, 0.0])
    if np.linalg.norm(u) < 1e-6:
        u = np.cross(n, [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    rel = pts - centroid
    ang = np.arctan2(rel @ v, rel @ u)
    return pts[np.argsort(ang)]


def _polytope_volume(faces: list[np.ndarray]) -> float:
    verts = np.concatenate(faces, axis=0)
    g = verts.mean(axis=0)
    vol = 0.0
    for face in faces:
        a = face[0] - g
        for i in range(1, len(face) - 1):
            b = face[i] - g
            c = face[i + 1] - g
            vol += abs(float(np.dot(a, np.cross(b, c)))) / 6.0
    return vol


def obb_intersection_volume(a: Obb, b: Obb) -> float:
    faces = _box_faces(a)
    for n, d in _half_spaces(b):
        new_faces: list[np.ndarray] = []
        cut_ring: list[np.ndarray] = []
        for face in faces:
            kept, cuts = _clip_face(face, n, d)
            if len(kept) >= 3:
                new_faces.append(np.array(kept))
            cut_ring.extend(cuts)
        cap = _assemble_cap(cut_ring, n)
        if cap is not None:
            new_faces.append(cap)
        faces = new_faces
        if not faces:
            return 0.0
    vol = _polytope_volume(faces)
    return vol if vol > 1e-15 else 0.0


def obb_iou(a: Obb, b: Obb) -> float:
    """Intersection volume over union volume of two oriented boxes, in [0, 1].

    Degenerate (measure-zero) contacts such as face-touching boxes score 0.
    """
    inter = obb_intersection_volume(a, b)
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))
