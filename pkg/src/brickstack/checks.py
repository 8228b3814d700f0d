"""Callable physics checks: the predicates behind every pipeline gate.

Each check is a pure function over immutable snapshots returning a ToolResult
(boolean verdict, scalar payload, note). The registry exposes machine-readable
descriptors so the same checks can be embedded in policy prompts and invoked
as tool calls.
"""

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import collision
from .geometry import Obb, Pose, interpolate_pose
from .world import (
    GRAVITY,
    ContactReport,
    Goal,
    SceneState,
    WorldConfig,
    ground_obb,
    gripper_obbs,
    plan_ticks,
)


@dataclass(frozen=True)
class Tolerances:
    """Every gate threshold in one sweepable block. Units in field names' docs."""

    clearance_min: float = 0.02      # m   minimum obstacle clearance at approach
    grip_margin: float = 0.02        # m   opening margin over brick width
    f_min: float = 5.0               # N   minimum finger normal force for a grasp
    grasp_err_tol: float = 0.003     # m   pose error budget between descend and grasp
    h_safe: float = 0.25             # m   safe lift height for transit
    v_th: float = 0.01               # m/s relative-speed threshold for slip
    mu: float = 0.5                  # -   friction coefficient for the cone test
    raise_step: float = 0.03         # m   re-approach raise after a misaligned place
    perp_tol: float = 0.002          # m   residual vertical gap at placement contact
    xy_tol: float = 0.005            # m   planar placement error budget
    yaw_tol_deg: float = 2.0         # deg yaw placement error budget
    progress_tol: float = 0.01       # m   goal-progress residual budget
    max_retries: int = 3             # per agent per brick cycle

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name == "max_retries":
                if value < 1:
                    raise ValueError("max_retries must be >= 1")
            elif value <= 0:
                raise ValueError(f"tolerance {name} must be strictly positive")

    def to_jsonable(self) -> dict:
        return asdict(self)

    @classmethod
    def from_jsonable(cls, d: dict) -> "Tolerances":
        return cls(**d)


@dataclass
class ToolResult:
    tool: str
    ok: bool
    value: float
    note: str = ""

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError("tool payload must be finite")

    def to_jsonable(self) -> dict:
        return {"tool": self.tool, "ok": self.ok, "value": self.value, "note": self.note}


def _obstacles(scene: SceneState, held_brick: int | None) -> list:
    exclude = {held_brick} if held_brick is not None else set()
    if scene.gripper.attached_brick is not None:
        exclude.add(scene.gripper.attached_brick)
    boxes = [b.obb() for b in scene.bricks if b.id not in exclude]
    boxes.append(ground_obb())
    return boxes


def _moving_bodies(scene: SceneState, pose: Pose, held_brick: int | None,
                   config: WorldConfig, width: float | None = None) -> list:
    bodies = [box for _, box in gripper_obbs(scene.gripper, config, pose=pose, width=width)]
    hb = held_brick if held_brick is not None else scene.gripper.attached_brick
    if hb is not None:
        brick = scene.brick(hb)
        rel = scene.gripper.attached_rel
        if rel is not None:
            bp = pose * rel
        else:
            bp = brick.pose
        bodies.append(Obb(bp.t, bp.r, brick.half_extents))
    return bodies


def collision_free_path(scene: SceneState, start: Pose, end: Pose,
                        held_brick: int | None = None,
                        tol: Tolerances | None = None,
                        config: WorldConfig | None = None,
                        width: float | None = None) -> ToolResult:
    """Sample the interpolated path at servo-tick granularity; SAT per sample.

    Verdict: no gripper-body (or held-brick) box overlaps any obstacle box at
    any sampled pose. Payload: minimum clearance along the path, refined by a
    convex-distance query at the most constrained sample.
    """
    config = config or WorldConfig()
    obstacles = _obstacles(scene, held_brick)
    arrays = collision.box_arrays(obstacles)
    k = plan_ticks(start, end, config)
    ok = True
    min_bound = math.inf
    argmin_pose = start
    for i in range(k + 1):
        pose = interpolate_pose(start, end, i / k)
        bodies = _moving_bodies(scene, pose, held_brick, config, width=width)
        for body in bodies:
            gaps = collision.sat_signed_gaps(body, *arrays)
            tick_min = float(gaps.min()) if len(gaps) else math.inf
            if tick_min < 0.0:
                ok = False
            if tick_min < min_bound:
                min_bound = tick_min
                argmin_pose = pose
        if not ok:
            break
    if not ok or not math.isfinite(min_bound):
        payload = 0.0
    else:
        payload = min(
            (collision.obb_distance(body, obox)
             for body in _moving_bodies(scene, argmin_pose, held_brick, config, width=width)
             for obox in obstacles),
            default=0.0,
        )
    return ToolResult("collision_free_path", ok, float(payload),
                      f"{k} ticks sampled, min clearance {payload:.4f} m")


def clearance(scene: SceneState, pose: Pose, held_brick: int | None = None,
              tol: Tolerances | None = None,
              config: WorldConfig | None = None,
              width: float | None = None) -> ToolResult:
    """Minimum convex distance from the gripper (and held brick) to obstacles.

    SAT separation bounds prune the exact-distance iterations: a pair whose
    lower bound already exceeds the best exact distance cannot improve it.
    """
    tol = tol or Tolerances()
    config = config or WorldConfig()
    obstacles = _obstacles(scene, held_brick)
    arrays = collision.box_arrays(obstacles)
    bodies = _moving_bodies(scene, pose, held_brick, config, width=width)
    candidates = []
    for body in bodies:
        gaps = collision.sat_signed_gaps(body, *arrays)
        for j, bound in enumerate(gaps):
            candidates.append((float(bound), body, obstacles[j]))
    candidates.sort(key=lambda c: c[0])
    dist = math.inf
    for bound, body, obox in candidates:
        if bound >= dist:
            break
        dist = min(dist, collision.obb_distance(body, obox))
    if not math.isfinite(dist):
        dist = 1.0
    return ToolResult("clearance", dist >= tol.clearance_min, float(dist),
                      f"min distance {dist:.4f} m vs c_min {tol.clearance_min} m")


def reachable(pose: Pose, workspace, tol: Tolerances | None = None,
              config: WorldConfig | None = None) -> ToolResult:
    """Target inside the workspace box with a near-vertical approach axis."""
    config = config or WorldConfig()
    ws = np.asarray(workspace, dtype=float)
    p = pose.t
    box_violation = float(np.max(np.concatenate([ws[0] - p, p - ws[1]])))
    tool_axis = pose.r.apply([0.0, 0.0, -1.0])
    angle = math.degrees(math.acos(max(-1.0, min(1.0, float(-tool_axis[2])))))
    angle_excess = max(0.0, angle - config.approach_cone_deg)
    violation = max(box_violation, angle_excess)
    ok = box_violation <= 0.0 and angle_excess <= 0.0
    return ToolResult("reachable", ok, violation,
                      f"box violation {box_violation:.4f} m, tilt {angle:.1f} deg")


def grasp_stable(report_a: ContactReport, report_b: ContactReport, pose_err: float,
                 tol: Tolerances | None = None) -> ToolResult:
    """Both finger forces above f_min and the descend-vs-grasp pose error small."""
    tol = tol or Tolerances()
    brick_a = report_a.bodies[1]
    brick_b = report_b.bodies[1]
    if brick_a != brick_b:
        raise ValueError(f"finger contacts on different bodies: {brick_a} vs {brick_b}")
    f_lo = min(report_a.normal_force, report_b.normal_force)
    ok = f_lo >= tol.f_min and pose_err <= tol.grasp_err_tol
    return ToolResult("grasp_stable", ok, float(f_lo),
                      f"min f_n {f_lo:.2f} N vs {tol.f_min} N, pose err {pose_err * 1000:.2f} mm")


def slip_check(brick_mass: float, f_n_total: float, v_rel: float,
               tol: Tolerances | None = None, accel: float = 0.0) -> ToolResult:
    """Friction-cone test on the summed finger forces plus a slip-speed clause."""
    if f_n_total < 0:
        raise ValueError("normal force must be non-negative")
    tol = tol or Tolerances()
    f_t = brick_mass * (GRAVITY + abs(accel))
    ok = f_t <= tol.mu * f_n_total and v_rel <= tol.v_th
    return ToolResult("slip_check", ok, float(f_t),
                      f"f_t {f_t:.2f} N vs mu*f_n {tol.mu * f_n_total:.2f} N, "
                      f"v_rel {v_rel:.3f} m/s vs {tol.v_th} m/s")


def yaw_error_deg(brick_pose: Pose, slot_pose: Pose) -> float:
    """Unsigned yaw misalignment folded into [0, 90] by 180-deg brick symmetry."""
    d = math.degrees(brick_pose.r.yaw() - slot_pose.r.yaw()) % 180.0
    return min(d, 180.0 - d)


def signed_yaw_correction(brick_pose: Pose, slot_pose: Pose) -> float:
    """Signed yaw residual in (-90, 90] deg, for re-approach correction."""
    d = math.degrees(brick_pose.r.yaw() - slot_pose.r.yaw()) % 180.0
    if d > 90.0:
        d -= 180.0
    return d


def placement_aligned(brick_pose: Pose, slot_pose: Pose, contact_gap: float,
                      tol: Tolerances | None = None) -> ToolResult:
    """Contact gap, planar offset, and folded yaw all inside their budgets."""
    tol = tol or Tolerances()
    e_xy = float(np.linalg.norm(brick_pose.t[:2] - slot_pose.t[:2]))
    e_theta = yaw_error_deg(brick_pose, slot_pose)
    ok = contact_gap <= tol.perp_tol and e_xy <= tol.xy_tol and e_theta <= tol.yaw_tol_deg
    return ToolResult("placement_aligned", ok, e_xy,
                      f"d_perp {contact_gap * 1000:.2f} mm, e_xy {e_xy * 1000:.2f} mm, "
                      f"e_theta {e_theta:.2f} deg")


def goal_progress(scene: SceneState, action, goal: Goal,
                  tol: Tolerances | None = None) -> ToolResult:
    """Predicted planar residual of the manipulated brick versus its slot.

    A brick moving rigidly with the gripper is projected through the action's
    waypoint. A staging action (phases 1-4) that keeps the gripper over the
    brick predicts no residual: the cycle will still deliver the brick to its
    slot. Any other action leaves the brick where it is.
    """
    tol = tol or Tolerances()
    slot_index = getattr(action, "slot_index", None)
    if slot_index is None or not 0 <= slot_index < len(goal.slots):
        raise ValueError(f"action targets unknown slot {slot_index!r}")
    slot = goal.slots[slot_index]
    brick_id = getattr(action, "brick_id", None)
    waypoint = action.waypoint
    if brick_id is None:
        residual = 0.0
    else:
        brick = scene.brick(brick_id)
        attached = scene.gripper.attached_brick == brick_id
        if attached and scene.gripper.attached_rel is not None:
            predicted = waypoint.target * scene.gripper.attached_rel
            residual = float(np.linalg.norm(predicted.t[:2] - slot.pose.t[:2]))
        elif waypoint.phase <= 4:
            over = float(np.linalg.norm(waypoint.target.t[:2] - brick.pose.t[:2]))
            graspable = over <= float(max(brick.half_extents[0], brick.half_extents[1]))
            if graspable:
                residual = 0.0
            else:
                residual = float(np.linalg.norm(brick.pose.t[:2] - slot.pose.t[:2]))
        else:
            residual = float(np.linalg.norm(brick.pose.t[:2] - slot.pose.t[:2]))
    return ToolResult("goal_progress", residual <= tol.progress_tol, residual,
                      f"predicted residual {residual * 1000:.1f} mm vs {tol.progress_tol * 1000:.0f} mm")


# ---------------------------------------------------------------------------
# Tool registry: descriptors double as the knowledge base embedded in prompts.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToolDescriptor:
    name: str
    params: tuple
    returns: str
    doc: str

    def to_jsonable(self) -> dict:
        return {
            "name": self.name,
            "params": [dict(p) for p in self.params],
            "returns": self.returns,
            "doc": self.doc,
        }


TOOL_DESCRIPTORS: dict[str, ToolDescriptor] = {
    d.name: d
    for d in [
        ToolDescriptor(
            "collision_free_path",
            (
                {"name": "start_pose", "type": "pose", "unit": "m/quat"},
                {"name": "end_pose", "type": "pose", "unit": "m/quat"},
                {"name": "held_brick", "type": "int|null", "unit": "-"},
            ),
            "verdict + min clearance (m)",
            "True iff the gripper (and held brick) sweep from start to end "
            "without overlapping any obstacle at servo-tick sampling.",
        ),
        ToolDescriptor(
            "clearance",
            (
                {"name": "pose", "type": "pose", "unit": "m/quat"},
                {"name": "held_brick", "type": "int|null", "unit": "-"},
            ),
            "verdict + min distance (m)",
            "Minimum convex distance from the gripper bodies to all obstacles; "
            "verdict compares against the clearance budget.",
        ),
        ToolDescriptor(
            "reachable",
            ({"name": "pose", "type": "pose", "unit": "m/quat"},),
            "verdict + max violation",
            "Target inside the workspace box with a near-vertical tool axis.",
        ),
        ToolDescriptor(
            "grasp_stable",
            (
                {"name": "f_n_a", "type": "float", "unit": "N"},
                {"name": "f_n_b", "type": "float", "unit": "N"},
                {"name": "pose_err", "type": "float", "unit": "m"},
            ),
            "verdict + min finger force (N)",
            "Both finger normal forces above the grasp threshold and the "
            "descend-vs-grasp pose error inside its budget.",
        ),
        ToolDescriptor(
            "slip_check",
            (
                {"name": "brick_mass", "type": "float", "unit": "kg"},
                {"name": "f_n_total", "type": "float", "unit": "N"},
                {"name": "v_rel", "type": "float", "unit": "m/s"},
            ),
            "verdict + tangential load (N)",
            "Friction-cone test: gravity load within mu times the summed "
            "finger normal forces, relative slip speed under threshold.",
        ),
        ToolDescriptor(
            "placement_aligned",
            (
                {"name": "brick_pose", "type": "pose", "unit": "m/quat"},
                {"name": "slot_pose", "type": "pose", "unit": "m/quat"},
                {"name": "contact_gap", "type": "float", "unit": "m"},
            ),
            "verdict + planar error (m)",
            "Placement contact gap, planar offset, and yaw (folded by the "
            "brick's 180-degree symmetry) all inside their budgets.",
        ),
        ToolDescriptor(
            "goal_progress",
            (
                {"name": "slot_index", "type": "int", "unit": "-"},
                {"name": "brick_id", "type": "int|null", "unit": "-"},
                {"name": "waypoint", "type": "waypoint", "unit": "m/quat"},
            ),
            "verdict + predicted residual (m)",
            "Predicted planar residual of the manipulated brick versus its "
            "slot after the action.",
        ),
    ]
}


def descriptors_for(names) -> list[dict]:
    return [TOOL_DESCRIPTORS[n].to_jsonable() for n in names]


def run_tool(name: str, args: dict, scene: SceneState, goal: Goal | None,
             tol: Tolerances, config: WorldConfig) -> ToolResult:
    """Execute a registry tool from JSON-style arguments (the tool-call path)."""
    if name not in TOOL_DESCRIPTORS:
        raise KeyError(f"unknown tool {name!r}")
    if name == "collision_free_path":
        return collision_free_path(
            scene,
            Pose.from_jsonable(args["start_pose"]),
            Pose.from_jsonable(args["end_pose"]),
            args.get("held_brick"),
            tol,
            config,
        )
    if name == "clearance":
        return clearance(scene, Pose.from_jsonable(args["pose"]), args.get("held_brick"), tol, config)
    if name == "reachable":
        return reachable(Pose.from_jsonable(args["pose"]), scene.workspace, tol, config)
    if name == "grasp_stable":
        ra = ContactReport((0, 0), 0.0, np.array([0.0, 0.0, 1.0]), float(args["f_n_a"]), 0.0)
        rb = ContactReport((1, 0), 0.0, np.array([0.0, 0.0, 1.0]), float(args["f_n_b"]), 0.0)
        return grasp_stable(ra, rb, float(args["pose_err"]), tol)
    if name == "slip_check":
        return slip_check(float(args["brick_mass"]), float(args["f_n_total"]),
                          float(args["v_rel"]), tol)
    if name == "placement_aligned":
        return placement_aligned(
            Pose.from_jsonable(args["brick_pose"]),
            Pose.from_jsonable(args["slot_pose"]),
            float(args["contact_gap"]),
            tol,
        )
    if name == "goal_progress":
        if goal is None:
            raise ValueError("goal_progress needs a goal")
        from .agents import CandidateAction
        from .world import Waypoint

        action = CandidateAction(
            waypoint=Waypoint.from_jsonable(args["waypoint"]),
            path_length=0.0,
            clearance=0.0,
            alignment=0.0,
            slot_index=int(args["slot_index"]),
            brick_id=args.get("brick_id"),
        )
        return goal_progress(scene, action, goal, tol)
    raise KeyError(name)
