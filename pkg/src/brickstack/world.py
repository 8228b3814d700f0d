"""The environment: scene state, parallel-jaw gripper, goals, and transitions.

The world is deterministic and quasi-static. Waypoint motion is interpolated
over adaptive servo ticks; contacts are resolved per tick; motion halts at the
first tick that would interpenetrate an obstacle beyond the contact tolerance.
Grasped bricks move rigidly with the gripper; released bricks drop along -z
and either rest (center of mass inside the shrunk support polygon) or topple
onto the adjacent side face.
"""

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import collision
from .geometry import Obb, Pose, Rotation, interpolate_pose

GRAVITY = 9.81

# Synthetic body ids for non-brick collision partners.
GROUND_ID = -1
FINGER_A_ID = -2
FINGER_B_ID = -3


class BrickStatus(str, Enum):
    FREE = "free"
    GRASPED = "grasped"
    PLACED = "placed"


class Pattern(str, Enum):
    PYRAMID = "pyramid"
    GRID = "grid"


@dataclass
class WorldConfig:
    """All world-model constants; every value a test or experiment may sweep."""

    contact_tol: float = 1e-4          # m, max allowed interpenetration
    contact_stiffness: float = 1e4     # N/m, linear contact spring
    grip_force: float = 15.0           # N per finger at a secured grasp
    trans_step: float = 0.005          # m of translation per servo tick
    rot_step_deg: float = 1.0          # deg of rotation per servo tick
    approach_height: float = 0.15      # m above brick top for pre-grasp
    finger_depth: float = 0.02         # m, finger extent along the grasp x axis
    finger_thickness: float = 0.01     # m, finger plate thickness
    finger_height: float = 0.05        # m, finger extent along z
    max_width: float = 0.15            # m, gripper opening limit
    brick_half_extents: tuple = (0.10, 0.05, 0.03)
    brick_mass: float = 1.0            # kg
    workspace_lo: tuple = (-0.55, -0.55, 0.0)
    workspace_hi: tuple = (0.55, 0.55, 0.50)
    ready_pose_xyz: tuple = (0.0, 0.0, 0.35)
    goal_base_xy: tuple = (0.0, 0.35)
    approach_cone_deg: float = 30.0    # max tilt of the tool axis from -z
    spawn_margin: float = 0.06         # m, pairwise + goal clearance at spawn
    settle_margin: float = 0.002       # m, support-polygon shrink
    push_max: float = 0.02             # m, max sidewall shove of a free brick
    classical_release_drop: float = 0.005  # m, scripted baseline release height
    slip_report_speed: float = 0.02    # m/s reported on a slipping grasp
    grasp_secure_force: float = 5.0    # N per finger for the GraspSecured event
    yaw_noise_deg_per_m: float = 600.0  # yaw noise scale per meter of pose noise
    max_spawn_rejects: int = 10_000

    def to_jsonable(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_jsonable(cls, d: dict) -> "WorldConfig":
        kwargs = {}
        for k, v in d.items():
            kwargs[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)


@dataclass
class Brick:
    id: int
    half_extents: np.ndarray
    mass: float
    pose: Pose
    status: BrickStatus = BrickStatus.FREE

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError("brick mass must be positive")
        if np.any(np.asarray(self.half_extents) <= 0):
            raise ValueError("brick half extents must be positive")

    def obb(self) -> Obb:
        return Obb(self.pose.t, self.pose.r, self.half_extents)

    def clone(self) -> "Brick":
        return Brick(self.id, np.array(self.half_extents), self.mass, self.pose, self.status)

    def to_jsonable(self) -> dict:
        return {
            "id": self.id,
            "half_extents": [float(v) for v in self.half_extents],
            "mass": self.mass,
            "pose": self.pose.to_jsonable(),
            "status": self.status.value,
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "Brick":
        return cls(
            d["id"],
            np.array(d["half_extents"], dtype=float),
            d["mass"],
            Pose.from_jsonable(d["pose"]),
            BrickStatus(d["status"]),
        )


@dataclass
class GripperState:
    pose: Pose
    width: float
    max_width: float
    finger_depth: float
    attached_brick: int | None = None
    grip_normal_force: float = 0.0
    attached_rel: Pose | None = None  # gripper-frame pose of the held brick

    def clone(self) -> "GripperState":
        return GripperState(
            self.pose,
            self.width,
            self.max_width,
            self.finger_depth,
            self.attached_brick,
            self.grip_normal_force,
            self.attached_rel,
        )

    def to_jsonable(self) -> dict:
        return {
            "pose": self.pose.to_jsonable(),
            "width": self.width,
            "max_width": self.max_width,
            "finger_depth": self.finger_depth,
            "attached_brick": self.attached_brick,
            "grip_normal_force": self.grip_normal_force,
            "attached_rel": self.attached_rel.to_jsonable() if self.attached_rel else None,
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "GripperState":
        return cls(
            Pose.from_jsonable(d["pose"]),
            d["width"],
            d["max_width"],
            d["finger_depth"],
            d["attached_brick"],
            d["grip_normal_force"],
            Pose.from_jsonable(d["attached_rel"]) if d.get("attached_rel") else None,
        )


@dataclass
class SceneState:
    bricks: list
    gripper: GripperState
    tick: int
    workspace: np.ndarray  # (2, 3) lo/hi

    def clone(self) -> "SceneState":
        return SceneState(
            [b.clone() for b in self.bricks],
            self.gripper.clone(),
            self.tick,
            np.array(self.workspace),
        )

    def brick(self, brick_id: int) -> Brick:
        for b in self.bricks:
            if b.id == brick_id:
                return b
        raise KeyError(f"no brick {brick_id}")

    def attached(self) -> Brick | None:
        if self.gripper.attached_brick is None:
            return None
        return self.brick(self.gripper.attached_brick)

    def in_workspace(self, point) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= self.workspace[0]) and np.all(p <= self.workspace[1]))

    def to_jsonable(self) -> dict:
        return {
            "version": 1,
            "workspace": [[float(v) for v in row] for row in self.workspace],
            "bricks": [b.to_jsonable() for b in self.bricks],
            "gripper": self.gripper.to_jsonable(),
            "tick": self.tick,
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "SceneState":
        if d.get("version") != 1:
            raise ValueError("unsupported scene version")
        return cls(
            [Brick.from_jsonable(b) for b in d["bricks"]],
            GripperState.from_jsonable(d["gripper"]),
            d["tick"],
            np.array(d["workspace"], dtype=float),
        )

    def to_json(self) -> str:
        return canonical_json(self.to_jsonable())

    @classmethod
    def from_json(cls, text: str) -> "SceneState":
        return cls.from_jsonable(json.loads(text))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def scene_document(scene: "SceneState", goal: "Goal") -> str:
    """The on-disk fixture format: one versioned document, scene plus goal."""
    payload = scene.to_jsonable()
    payload["goal"] = goal.to_jsonable()
    return canonical_json(payload)


def load_scene_document(text: str) -> tuple["SceneState", "Goal"]:
    data = json.loads(text)
    goal = Goal.from_jsonable(data.pop("goal"))
    return SceneState.from_jsonable(data), goal


@dataclass(frozen=True)
class Slot:
    index: int
    pose: Pose

    def to_jsonable(self) -> dict:
        return {"index": self.index, "pose": self.pose.to_jsonable()}

    @classmethod
    def from_jsonable(cls, d: dict) -> "Slot":
        return cls(d["index"], Pose.from_jsonable(d["pose"]))


@dataclass(frozen=True)
class Goal:
    pattern: Pattern
    slots: tuple
    gap: float
    brick_half_extents: tuple

    def slot(self, index: int) -> Slot:
        return self.slots[index]

    def footprint_rects(self):
        h = self.brick_half_extents
        for s in self.slots:
            yield s.pose.t[:2], s.pose.r.yaw(), (h[0], h[1])

    def to_jsonable(self) -> dict:
        return {
            "pattern": self.pattern.value,
            "gap": self.gap,
            "brick_half_extents": list(self.brick_half_extents),
            "slots": [s.to_jsonable() for s in self.slots],
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "Goal":
        return cls(
            Pattern(d["pattern"]),
            tuple(Slot.from_jsonable(s) for s in d["slots"]),
            d["gap"],
            tuple(d["brick_half_extents"]),
        )


class GripperCommand:
    HOLD = "hold"
    OPEN_TO = "open"
    CLOSE = "close"

    def __init__(self, kind: str, width: float | None = None):
        if kind not in (self.HOLD, self.OPEN_TO, self.CLOSE):
            raise ValueError(f"unknown gripper command {kind!r}")
        if kind == self.OPEN_TO and width is None:
            raise ValueError("open command needs a width")
        self.kind = kind
        self.width = width

    @classmethod
    def hold(cls) -> "GripperCommand":
        return cls(cls.HOLD)

    @classmethod
    def open_to(cls, width: float) -> "GripperCommand":
        return cls(cls.OPEN_TO, width)

    @classmethod
    def close(cls) -> "GripperCommand":
        return cls(cls.CLOSE)

    def to_jsonable(self) -> dict:
        d = {"kind": self.kind}
        if self.width is not None:
            d["width"] = self.width
        return d

    @classmethod
    def from_jsonable(cls, d: dict) -> "GripperCommand":
        return cls(d["kind"], d.get("width"))


@dataclass
class Waypoint:
    target: Pose
    command: GripperCommand
    phase: int  # agent index 1..6

    def to_jsonable(self) -> dict:
        return {
            "target": self.target.to_jsonable(),
            "command": self.command.to_jsonable(),
            "phase": self.phase,
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "Waypoint":
        return cls(Pose.from_jsonable(d["target"]), GripperCommand.from_jsonable(d["command"]), d["phase"])


@dataclass
class ContactReport:
    bodies: tuple
    penetration: float
    normal: np.ndarray
    normal_force: float
    tangential_load: float

    def to_jsonable(self) -> dict:
        return {
            "bodies": list(self.bodies),
            "penetration": self.penetration,
            "normal": [float(v) for v in self.normal],
            "normal_force": self.normal_force,
            "tangential_load": self.tangential_load,
        }


@dataclass
class Event:
    kind: str
    tick: int
    data: dict = field(default_factory=dict)

    def to_jsonable(self) -> dict:
        return {"kind": self.kind, "tick": self.tick, "data": self.data}


class EventKind:
    CONTACT_MADE = "ContactMade"
    GRASP_SECURED = "GraspSecured"
    SLIP_DETECTED = "SlipDetected"
    COLLISION_DETECTED = "CollisionDetected"
    RELEASE_SETTLED = "ReleaseSettled"
    TOPPLED = "Toppled"


class PlacementError(RuntimeError):
    """Raised when random brick placement cannot satisfy the constraints."""


def contact_force(penetration: float, config: WorldConfig) -> float:
    """Linear contact spring: f_n = k_c * penetration."""
    if penetration < 0:
        raise ValueError("penetration must be non-negative")
    return config.contact_stiffness * penetration


def plan_ticks(start: Pose, end: Pose, config: WorldConfig) -> int:
    """Servo tick count adapted to motion size (5 mm / 1 deg granularity)."""
    dt = float(np.linalg.norm(end.t - start.t))
    dr = math.degrees(start.r.angle_rad_to(end.r))
    return max(1, math.ceil(max(dt / config.trans_step, dr / config.rot_step_deg)))


def ground_obb() -> Obb:
    return Obb([0.0, 0.0, -0.5], Rotation.identity(), [5.0, 5.0, 0.5])


def gripper_obbs(gripper: GripperState, config: WorldConfig, pose: Pose | None = None,
                 width: float | None = None) -> list:
    """The two finger plates as oriented boxes, ids FINGER_A_ID / FINGER_B_ID.

    Fingers sit symmetric about the tool center point across the local y axis
    with inner faces `width` apart; while holding a brick they straddle the
    brick's actual y center (an offset grasp keeps both plates on the brick).
    """
    p = pose if pose is not None else gripper.pose
    w = width if width is not None else gripper.width
    center_y = 0.0
    if gripper.attached_brick is not None and gripper.attached_rel is not None and width is None:
        center_y = float(gripper.attached_rel.t[1])
    half = np.array([config.finger_depth / 2, config.finger_thickness / 2, config.finger_height / 2])
    offset = w / 2 + config.finger_thickness / 2
    boxes = []
    for fid, sign in ((FINGER_A_ID, -1.0), (FINGER_B_ID, 1.0)):
        center = p.apply([0.0, center_y + sign * offset, 0.0])
        boxes.append((fid, Obb(center, p.r, half)))
    return boxes


# ---------------------------------------------------------------------------
# Goal patterns
# ---------------------------------------------------------------------------


def generate_goal(pattern: Pattern, brick_half_extents, gap: float, base_pose: Pose) -> Goal:
    """Slot layout for six bricks.

    Pyramid: layers of 3/2/1, upper layers centered over the one below, the
    given horizontal gap between in-layer neighbors. Grid: 3 columns x 2
    layers with vertical joints aligned. Slot z rests each brick on the layer
    below (or the ground plane).
    """
    if gap < 0:
        raise ValueError("gap must be non-negative")
    hx, hy, hz = (float(v) for v in brick_half_extents)
    pitch = 2 * hx + gap
    if pattern == Pattern.PYRAMID:
        layout = [
            (0, [-pitch, 0.0, pitch]),
            (1, [-pitch / 2, pitch / 2]),
            (2, [0.0]),
        ]
    elif pattern == Pattern.GRID:
        layout = [
            (0, [-pitch, 0.0, pitch]),
            (1, [-pitch, 0.0, pitch]),
        ]
    else:
        raise ValueError(f"unsupported pattern {pattern!r}")
    slots = []
    index = 0
    for layer, xs in layout:
        z = hz + layer * 2 * hz
        for x in xs:
            local = Pose([x, 0.0, z])
            slots.append(Slot(index, base_pose * local))
            index += 1
    goal = Goal(pattern, tuple(slots), gap, (hx, hy, hz))
    _check_slot_separation(goal)
    return goal


def _check_slot_separation(goal: Goal) -> None:
    hx, hy, hz = goal.brick_half_extents
    n = len(goal.slots)
    for i in range(n):
        for j in range(i + 1, n):
            a, b = goal.slots[i], goal.slots[j]
            if abs(a.pose.t[2] - b.pose.t[2]) > 1e-9:
                continue  # different layers stack by design
            if collision.rects_overlap_2d(
                a.pose.t[:2], a.pose.r.yaw(), (hx, hy),
                b.pose.t[:2], b.pose.r.yaw(), (hx, hy),
                margin=-1e-9,
            ):
                raise ValueError("goal slots overlap within a layer")


# ---------------------------------------------------------------------------
# Initial scene construction and randomization
# ---------------------------------------------------------------------------


def build_scene(config: WorldConfig, n_bricks: int = 6) -> SceneState:
    """Six free bricks parked in a line, gripper at the ready pose."""
    bricks = []
    h = np.array(config.brick_half_extents)
    for i in range(n_bricks):
        pose = Pose([-0.45 + i * 0.18, -0.40, h[2]])
        bricks.append(Brick(i, np.array(h), config.brick_mass, pose))
    gripper = GripperState(
        Pose(np.array(config.ready_pose_xyz)),
        width=config.max_width,
        max_width=config.max_width,
        finger_depth=config.finger_depth,
    )
    workspace = np.array([config.workspace_lo, config.workspace_hi], dtype=float)
    return SceneState(bricks, gripper, 0, workspace)


def randomize_initial(scene: SceneState, seed: int, config: WorldConfig,
                      goal: Goal | None = None) -> SceneState:
    """Uniform random (x, y, yaw) ground placement of all free bricks.

    Rejection-sampled so bricks keep `spawn_margin` clearance pairwise and to
    the goal footprint; deterministic for a given seed.
    """
    rng = np.random.default_rng(seed)
    out = scene.clone()
    lo = out.workspace[0]
    hi = out.workspace[1]
    placed: list[tuple] = []
    keepout = list(goal.footprint_rects()) if goal is not None else []
    for b in out.bricks:
        h = b.half_extents
        pad = float(math.hypot(h[0], h[1]))
        tries = 0
        while True:
            tries += 1
            if tries > config.max_spawn_rejects:
                raise PlacementError(f"could not place brick {b.id} after {tries - 1} rejections")
            x = rng.uniform(lo[0] + pad, hi[0] - pad)
            y = rng.uniform(lo[1] + pad, hi[1] - pad)
            yaw = rng.uniform(-math.pi, math.pi)
            ok = True
            for kc, kyaw, kh in keepout:
                if collision.rects_overlap_2d(
                    [x, y], yaw, (h[0], h[1]), kc, kyaw, kh, margin=config.spawn_margin
                ):
                    ok = False
                    break
            if ok:
                for pc, pyaw, ph in placed:
                    if collision.rects_overlap_2d(
                        [x, y], yaw, (h[0], h[1]), pc, pyaw, ph, margin=config.spawn_margin
                    ):
                        ok = False
                        break
            if ok:
                break
        b.pose = Pose([x, y, float(h[2])], Rotation.from_yaw(yaw))
        b.status = BrickStatus.FREE
        placed.append(((x, y), yaw, (float(h[0]), float(h[1]))))
    return out


# ---------------------------------------------------------------------------
# The transition: step() and its helpers
# ---------------------------------------------------------------------------


def _obstacle_list(scene: SceneState, exclude: set) -> list:
    obs = [(b.id, b.obb()) for b in scene.bricks if b.id not in exclude]
    obs.append((GROUND_ID, ground_obb()))
    return obs


def _collide_bodies(bodies, obstacles, arrays):
    """Yield (body_id, obs_id, gap, normal) for every touching/overlapping pair.

    Batched SAT prunes the all-clear case; the scalar query recovers contact
    normals only for the few touching pairs.
    """
    hits = []
    for bid, box in bodies:
        gaps = collision.sat_signed_gaps(box, *arrays)
        for idx in np.nonzero(gaps <= 0.0)[0]:
            oid, obox = obstacles[int(idx)]
            gap, normal = collision.sat_query(box, obox)
            hits.append((bid, oid, gap, normal))
    return hits


def slip_state(scene: SceneState, config: WorldConfig, mu: float = 0.5) -> tuple[float, float, float]:
    """(tangential load N, total normal force N, reported relative speed m/s).

    The grasp is rigid in this world; a friction-cone violation is reported
    as a synthetic relative slip speed above threshold rather than an actual
    relative trajectory.
    """
    brick = scene.attached()
    if brick is None:
        return 0.0, 0.0, 0.0
    f_t = brick.mass * GRAVITY
    f_n_total = 2.0 * scene.gripper.grip_normal_force
    v_rel = config.slip_report_speed if f_t > mu * f_n_total else 0.0
    return f_t, f_n_total, v_rel


def step(scene: SceneState, waypoint: Waypoint, config: WorldConfig,
         mu: float = 0.5) -> tuple[SceneState, list, list]:
    """Execute one waypoint: gripper command at segment start, then servo ticks.

    Returns (next scene, contact reports, events). Collisions freeze motion at
    the pre-collision tick and are reported as events, never raised.
    """
    sc = scene.clone()
    contacts: list[ContactReport] = []
    events: list[Event] = []

    cmd = waypoint.command
    if cmd.kind == GripperCommand.OPEN_TO:
        _apply_open(sc, cmd.width, contacts, events, config)
    elif cmd.kind == GripperCommand.CLOSE:
        _apply_close(sc, contacts, events, config)

    start = sc.gripper.pose
    target = waypoint.target
    k = plan_ticks(start, target, config)
    held = sc.attached()
    rel = sc.gripper.attached_rel
    slip_flagged = False
    seen_contacts: set = set()
    exclude = {held.id} if held is not None else set()
    obstacles = _obstacle_list(sc, exclude)
    arrays = collision.box_arrays([box for _, box in obstacles])

    for i in range(1, k + 1):
        pose = interpolate_pose(start, target, i / k)
        held_pose = pose * rel if held is not None else None
        moving_down = pose.t[2] < sc.gripper.pose.t[2] - 1e-12

        bodies = gripper_obbs(sc.gripper, config, pose=pose)
        if held is not None:
            bodies = bodies + [(held.id, Obb(held_pose.t, held_pose.r, held.half_extents))]
        hits = _collide_bodies(bodies, obstacles, arrays)

        blocked = False
        for bid, oid, gap, normal in hits:
            pen = -gap
            if pen <= config.contact_tol:
                key = (bid, oid)
                if key not in seen_contacts:
                    seen_contacts.add(key)
                    force = contact_force(max(0.0, pen), config)
                    contacts.append(ContactReport((bid, oid), max(0.0, pen), normal, force, 0.0))
                    events.append(Event(EventKind.CONTACT_MADE, sc.tick + 1,
                                        {"bodies": [bid, oid], "gap": max(0.0, pen)}))
                continue
            # Penetration beyond tolerance: push, land, or freeze.
            if bid in (FINGER_A_ID, FINGER_B_ID) and oid >= 0:
                push_dir = _push_direction(sc, oid, bodies, config)
                if push_dir is not None and _push_brick(sc, oid, push_dir, bodies, config):
                    events.append(Event(EventKind.CONTACT_MADE, sc.tick + 1,
                                        {"bodies": [bid, oid], "push": True}))
                    obstacles = _obstacle_list(sc, exclude)
                    arrays = collision.box_arrays([box for _, box in obstacles])
                    continue
            if bid >= 0 and moving_down and abs(float(normal[2])) >= 0.7:
                gap_before = _drop_distance(sc, held) if held is not None else 0.0
                events.append(Event(EventKind.CONTACT_MADE, sc.tick + 1,
                                    {"bodies": [bid, oid], "gap": gap_before, "landing": True}))
            else:
                events.append(Event(EventKind.COLLISION_DETECTED, sc.tick + 1,
                                    {"bodies": [bid, oid], "penetration": pen}))
            blocked = True
            break
        if blocked:
            break

        sc.gripper.pose = pose
        if held is not None:
            held.pose = held_pose
        sc.tick += 1
        if held is not None and not slip_flagged:
            f_t = held.mass * GRAVITY
            if f_t > mu * 2.0 * sc.gripper.grip_normal_force:
                slip_flagged = True
                events.append(Event(EventKind.SLIP_DETECTED, sc.tick,
                                    {"v_rel": config.slip_report_speed, "f_t": f_t,
                                     "f_n_total": 2.0 * sc.gripper.grip_normal_force}))
    return sc, contacts, events


def _push_direction(scene: SceneState, brick_id: int, bodies, config: WorldConfig):
    """Horizontal minimum-translation direction for a grazed free brick.

    A finger plate grazing the side region of a free brick shoves it aside;
    a plate descending onto the brick's interior (large footprint overlap)
    is a genuine collision. Returns a unit 2-vector or None.
    """
    b = scene.brick(brick_id)
    if b.status != BrickStatus.FREE:
        return None
    bc = b.pose.t[:2]
    byaw = b.pose.r.yaw()
    bh = (float(b.half_extents[0]), float(b.half_extents[1]))
    best = None
    for bid, fbox in bodies:
        if bid not in (FINGER_A_ID, FINGER_B_ID):
            continue
        fc = fbox.center[:2]
        fyaw = fbox.rotation.yaw()
        fh = (float(fbox.half_extents[0]), float(fbox.half_extents[1]))
        d = np.asarray(bc) - np.asarray(fc)
        a1 = _2d_axes(byaw)
        a2 = _2d_axes(fyaw)
        overlap_min = math.inf
        direction = None
        separated = False
        for axis in (*a1, *a2):
            r1 = float(np.abs(a1 @ axis) @ np.asarray(bh))
            r2 = float(np.abs(a2 @ axis) @ np.asarray(fh))
            dist = float(axis @ d)
            overlap = r1 + r2 - abs(dist)
            if overlap <= 0:
                separated = True
                break
            if overlap < overlap_min:
                overlap_min = overlap
                direction = axis if dist >= 0 else -axis
        if separated or direction is None:
            continue
        if best is None or overlap_min < best[0]:
            best = (overlap_min, direction)
    if best is None or best[0] > config.push_max:
        return None
    return best[1]


def _2d_axes(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, s], [-s, c]])


def _push_brick(scene: SceneState, brick_id: int, direction2, bodies, config: WorldConfig) -> bool:
    """Shove a free brick horizontally until it clears the gripper bodies.

    Quasi-static stand-in for a finger grazing a brick sidewall on descent.
    Fails (returns False) if the shoved brick would hit something else.
    """
    b = scene.brick(brick_id)
    direction = np.array([float(direction2[0]), float(direction2[1]), 0.0])
    n = np.linalg.norm(direction)
    if n < 1e-9:
        return False
    direction /= n
    step_size = 0.001
    original = b.pose
    finger_boxes = [gbox for bid, gbox in bodies if bid in (FINGER_A_ID, FINGER_B_ID)]
    moved = 0.0
    while moved <= config.push_max + 1e-9:
        box = b.obb()
        if all(collision.sat_query(box, gb)[0] > 0.0 for gb in finger_boxes):
            for other in scene.bricks:
                if other.id == brick_id:
                    continue
                if collision.obb_overlap(box, other.obb(), tol=config.contact_tol):
                    b.pose = original
                    return False
            return True
        moved += step_size
        b.pose = Pose(original.t + direction * moved, original.r)
    b.pose = original
    return False


def _grasp_interval(scene: SceneState, config: WorldConfig):
    """Find the brick between the fingers, with its y-interval in gripper frame.

    Returns (brick, y_lo, y_hi) or None. The y-interval is taken over the
    brick's footprint SLICE inside the finger's x window: only material the
    finger plates can actually touch counts, so a slightly yawed brick whose
    far corners stick out does not spoil the bracket test.
    """
    g = scene.gripper
    inv = g.pose.inverse()
    fx = config.finger_depth / 2
    fz = config.finger_height / 2
    strip = np.array([[-fx, -10.0], [fx, -10.0], [fx, 10.0], [-fx, 10.0]])
    best = None
    for b in scene.bricks:
        if b.status == BrickStatus.PLACED:
            continue
        local_corners = np.array([inv.apply(c) for c in b.obb().corners()])
        z_lo, z_hi = float(local_corners[:, 2].min()), float(local_corners[:, 2].max())
        if z_hi < -fz or z_lo > fz:
            continue
        foot = collision.convex_hull_2d(local_corners[:, :2])
        if len(foot) < 3:
            continue
        sliced = collision.clip_polygon_2d(foot, strip)
        if len(sliced) < 3:
            continue
        y_lo, y_hi = float(sliced[:, 1].min()), float(sliced[:, 1].max())
        if y_hi < -g.width / 2 - config.finger_thickness or y_lo > g.width / 2 + config.finger_thickness:
            continue
        if best is None or abs(0.5 * (y_lo + y_hi)) < abs(0.5 * (best[1] + best[2])):
            best = (b, y_lo, y_hi)
    return best


def _apply_close(scene: SceneState, contacts, events, config: WorldConfig) -> None:
    g = scene.gripper
    if g.attached_brick is not None:
        return  # already holding; at most one brick is ever grasped
    if g.grip_normal_force <= 0.0:
        g.grip_normal_force = config.grip_force
    found = _grasp_interval(scene, config)
    if found is None:
        g.width = 0.0
        return
    brick, y_lo, y_hi = found
    two_sided = y_lo > -g.width / 2 and y_hi < g.width / 2
    pen = g.grip_normal_force / config.contact_stiffness
    f_t_share = brick.mass * GRAVITY / 2.0
    if not two_sided:
        # One finger reaches the brick first and closing stalls against it.
        side = -1.0 if abs(y_lo) >= abs(y_hi) else 1.0
        g.width = 2.0 * max(abs(y_lo), abs(y_hi))
        finger = FINGER_A_ID if side < 0 else FINGER_B_ID
        normal = g.pose.r.apply([0.0, side, 0.0])
        contacts.append(ContactReport((finger, brick.id), pen, normal, g.grip_normal_force, f_t_share))
        events.append(Event(EventKind.CONTACT_MADE, scene.tick, {"bodies": [finger, brick.id]}))
        return
    g.width = (y_hi - y_lo) - 2.0 * pen
    for fid, sign in ((FINGER_A_ID, -1.0), (FINGER_B_ID, 1.0)):
        normal = g.pose.r.apply([0.0, -sign, 0.0])
        contacts.append(ContactReport((fid, brick.id), pen, normal, g.grip_normal_force, f_t_share))
        events.append(Event(EventKind.CONTACT_MADE, scene.tick, {"bodies": [fid, brick.id]}))
    brick.status = BrickStatus.GRASPED
    g.attached_brick = brick.id
    g.attached_rel = g.pose.inverse() * brick.pose
    if g.grip_normal_force >= config.grasp_secure_force:
        events.append(Event(EventKind.GRASP_SECURED, scene.tick,
                            {"brick": brick.id, "f_n": g.grip_normal_force}))


def _held_release_span(scene: SceneState, config: WorldConfig) -> float:
    """Opening beyond this span loses finger contact with the held brick.

    Uses the same finger-window slice as grasping, so an in-hand yaw offset
    does not spuriously inflate the release threshold.
    """
    found = _grasp_interval(scene, config)
    held = scene.attached()
    if found is not None and held is not None and found[0].id == held.id:
        return found[2] - found[1]
    if held is not None:
        inv = scene.gripper.pose.inverse()
        local = np.array([inv.apply(c) for c in held.obb().corners()])
        return float(local[:, 1].max() - local[:, 1].min())
    return 0.0


def _apply_open(scene: SceneState, width: float, contacts, events, config: WorldConfig) -> None:
    g = scene.gripper
    new_width = min(max(0.0, width), g.max_width)
    held = scene.attached()
    if held is not None and new_width > _held_release_span(scene, config):
        g.width = new_width
        _detach_and_settle(scene, contacts, events, config)
        return
    g.width = new_width


def _detach_and_settle(scene: SceneState, contacts, events, config: WorldConfig) -> None:
    g = scene.gripper
    brick = scene.attached()
    g.attached_brick = None
    g.attached_rel = None
    g.grip_normal_force = 0.0
    brick.status = BrickStatus.FREE
    settled = settle_release_brick(scene, brick.id, config)
    events.extend(settled)


def settle_release(scene: SceneState, config: WorldConfig) -> tuple[SceneState, list]:
    """Release the attached brick and let it settle; returns the new scene."""
    if scene.attached() is None:
        raise ValueError("settle_release requires an attached brick")
    if scene.gripper.width <= _held_release_span(scene, config):
        raise ValueError("gripper must be opened wider than the brick before release")
    sc = scene.clone()
    contacts: list = []
    events: list = []
    _detach_and_settle(sc, contacts, events, config)
    return sc, events


def _drop_distance(scene: SceneState, brick: Brick) -> float:
    """How far the brick can fall along -z before first contact below.

    Works for any orientation: footprints are the convex hulls of the corner
    projections, so toppled (lying) bricks are handled too.
    """
    corners = brick.obb().corners()
    bottom = float(corners[:, 2].min())
    foot = collision.convex_hull_2d(corners[:, :2])
    drop = bottom  # to ground
    for other in scene.bricks:
        if other.id == brick.id or other.status == BrickStatus.GRASPED:
            continue
        ocorners = other.obb().corners()
        top = float(ocorners[:, 2].max())
        if top > bottom + 1e-9:
            continue
        ohull = collision.convex_hull_2d(ocorners[:, :2])
        patch = collision.clip_polygon_2d(foot, ohull)
        if collision.polygon_area_2d(patch) > 1e-12:
            drop = min(drop, bottom - top)
    return max(0.0, drop)


def support_gap(scene: SceneState, brick_id: int) -> float:
    """Vertical gap between a brick and whatever it would land on."""
    return _drop_distance(scene, scene.brick(brick_id))


def _support_polygon(scene: SceneState, brick: Brick) -> np.ndarray:
    """Convex hull of the contact patch under the brick's bottom face."""
    bottom = float(brick.pose.t[2] - brick.half_extents[2])
    foot = collision.rect_corners_2d(
        brick.pose.t[:2], brick.pose.r.yaw(),
        (float(brick.half_extents[0]), float(brick.half_extents[1])),
    )
    pts = []
    if bottom <= 1e-6:
        pts.extend(foot)
    for other in scene.bricks:
        if other.id == brick.id or other.status == BrickStatus.GRASPED:
            continue
        top = float(other.pose.t[2] + other.half_extents[2])
        if abs(top - bottom) > 1e-6:
            continue
        rect = collision.rect_corners_2d(
            other.pose.t[:2], other.pose.r.yaw(),
            (float(other.half_extents[0]), float(other.half_extents[1])),
        )
        patch = collision.clip_polygon_2d(foot, rect)
        if len(patch) >= 3:
            pts.extend(patch)
    if not pts:
        return np.zeros((0, 2))
    return collision.convex_hull_2d(np.array(pts))


def settle_release_brick(scene: SceneState, brick_id: int, config: WorldConfig) -> list:
    """Drop a freed brick along -z; rest it or topple it over the failing edge."""
    brick = scene.brick(brick_id)
    events: list = []
    drop = _drop_distance(scene, brick)
    brick.pose = Pose(brick.pose.t - np.array([0.0, 0.0, drop]), brick.pose.r)
    hull = _support_polygon(scene, brick)
    com = brick.pose.t[:2]
    stable = collision.point_in_hull_margin(com, hull, margin=config.settle_margin)
    if stable:
        brick.status = BrickStatus.PLACED
        events.append(Event(EventKind.RELEASE_SETTLED, scene.tick,
                            {"brick": brick.id, "drop": drop, "stable": True}))
        return events
    _topple(scene, brick, hull, config)
    brick.status = BrickStatus.PLACED
    events.append(Event(EventKind.RELEASE_SETTLED, scene.tick,
                        {"brick": brick.id, "drop": drop, "stable": False}))
    events.append(Event(EventKind.TOPPLED, scene.tick, {"brick": brick.id}))
    return events


def _topple(scene: SceneState, brick: Brick, hull: np.ndarray, config: WorldConfig) -> None:
    """Tip the brick over the most-violated support edge onto its side face."""
    com = brick.pose.t[:2]
    if len(hull) >= 3:
        # Outward direction: from hull centroid toward the COM.
        centroid = hull.mean(axis=0)
        out = com - centroid
    else:
        out = np.array([1.0, 0.0])
    n = np.linalg.norm(out)
    out = out / n if n > 1e-9 else np.array([1.0, 0.0])
    # Snap the tip direction to the brick's nearest horizontal axis.
    yaw = brick.pose.r.yaw()
    axes2 = [
        (np.array([math.cos(yaw), math.sin(yaw)]), 0),
        (np.array([-math.sin(yaw), math.cos(yaw)]), 1),
    ]
    best_axis, best_idx, best_dot = None, 0, -math.inf
    for axis, idx in axes2:
        for sgn in (1.0, -1.0):
            d = float(np.dot(sgn * axis, out))
            if d > best_dot:
                best_dot, best_axis, best_idx = d, sgn * axis, idx
    a = float(brick.half_extents[best_idx])
    hz = float(brick.half_extents[2])
    support_z = float(brick.pose.t[2] - hz)
    # Rotate 90 degrees about the bottom edge orthogonal to best_axis so the
    # top face falls outward, landing the adjacent side face on the support.
    edge_dir3 = np.array([-best_axis[1], best_axis[0], 0.0])
    tip_rot = Rotation.from_axis_angle(edge_dir3, math.pi / 2)
    new_rot = tip_rot * brick.pose.r
    new_center = np.array([
        brick.pose.t[0] + best_axis[0] * (a + hz),
        brick.pose.t[1] + best_axis[1] * (a + hz),
        support_z + a,
    ])
    brick.pose = Pose(new_center, new_rot)
    # Nudge clear of anything it now overlaps; deterministic 1 mm steps.
    for _ in range(100):
        box = brick.obb()
        blocked = any(
            collision.obb_overlap(box, o.obb(), tol=config.contact_tol)
            for o in scene.bricks if o.id != brick.id
        )
        if not blocked:
            break
        brick.pose = Pose(brick.pose.t + np.array([best_axis[0], best_axis[1], 0.0]) * 0.001,
                          brick.pose.r)
    # The tipped brick may now hang past its old support: let it fall again.
    extra = _drop_distance(scene, brick)
    if extra > 0.0:
        brick.pose = Pose(brick.pose.t - np.array([0.0, 0.0, extra]), brick.pose.r)


# ---------------------------------------------------------------------------
# Perception and fault injection (trial-level sensing/actuation models)
# ---------------------------------------------------------------------------


@dataclass
class PerceptionModel:
    """Constant per-brick pose bias until a brick is first grasped.

    Models initial registration error from vision; once the gripper has held
    a brick, its pose (and the in-hand offset) is known exactly.
    """

    biases: dict = field(default_factory=dict)  # brick id -> (dx, dy, dyaw)
    refined: set = field(default_factory=set)

    @classmethod
    def from_seed(cls, seed: int, brick_ids, sigma: float, config: WorldConfig) -> "PerceptionModel":
        if sigma <= 0.0:
            return cls({}, set())
        rng = np.random.default_rng(seed ^ 0x5EED)
        yaw_sigma = math.radians(sigma * config.yaw_noise_deg_per_m)
        biases = {}
        for bid in brick_ids:
            dx, dy = rng.normal(0.0, sigma, size=2)
            dyaw = rng.normal(0.0, yaw_sigma)
            biases[int(bid)] = (float(dx), float(dy), float(dyaw))
        return cls(biases, set())

    def observe(self, scene: SceneState) -> SceneState:
        if not self.biases:
            return scene
        out = scene.clone()
        for b in out.bricks:
            if b.id in self.refined or b.id not in self.biases:
                continue
            dx, dy, dyaw = self.biases[b.id]
            b.pose = Pose(b.pose.t + np.array([dx, dy, 0.0]),
                          Rotation.from_yaw(dyaw) * b.pose.r)
        return out

    def mark_refined(self, brick_id: int) -> None:
        self.refined.add(brick_id)

    def to_jsonable(self) -> dict:
        return {
            "biases": {str(k): list(v) for k, v in self.biases.items()},
            "refined": sorted(self.refined),
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "PerceptionModel":
        return cls(
            {int(k): tuple(v) for k, v in d.get("biases", {}).items()},
            set(d.get("refined", [])),
        )


@dataclass
class FaultPlan:
    """Deterministic fault injection for experiments and acceptance checks."""

    weak_grasp: dict = field(default_factory=dict)   # cycle -> forced total f_n (N)
    weak_grasp_used: set = field(default_factory=set)
    weak_grasp_persistent: bool = False              # force every grasp of the cycle
    placement_bias_xy: tuple = (0.0, 0.0)            # added to every first place attempt

    def grasp_force_for(self, cycle: int, default_per_finger: float) -> float:
        if cycle in self.weak_grasp:
            if self.weak_grasp_persistent:
                return self.weak_grasp[cycle] / 2.0
            if cycle not in self.weak_grasp_used:
                self.weak_grasp_used.add(cycle)
                return self.weak_grasp[cycle] / 2.0
        return default_per_finger

    def to_jsonable(self) -> dict:
        return {
            "weak_grasp": {str(k): v for k, v in self.weak_grasp.items()},
            "weak_grasp_used": sorted(self.weak_grasp_used),
            "weak_grasp_persistent": self.weak_grasp_persistent,
            "placement_bias_xy": list(self.placement_bias_xy),
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "FaultPlan":
        return cls(
            {int(k): v for k, v in d.get("weak_grasp", {}).items()},
            set(d.get("weak_grasp_used", [])),
            d.get("weak_grasp_persistent", False),
            tuple(d.get("placement_bias_xy", (0.0, 0.0))),
        )
