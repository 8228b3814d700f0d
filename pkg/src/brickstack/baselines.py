"""Reference controllers: a hand-scripted open-loop baseline and an ungated
single-prompt variant.

Both emit plain waypoints through the same world transition as the gated
pipeline, so outcome differences are attributable to the reasoning layer,
not the actuation stack.
"""

import math
from dataclasses import dataclass

import numpy as np

from .agents import Memory, TrialLog, run_pipeline
from .checks import Tolerances
from .geometry import Pose, Rotation
from .reasoner import SingleAgentPolicy
from .world import (
    BrickStatus,
    FaultPlan,
    Goal,
    GripperCommand,
    PerceptionModel,
    SceneState,
    Waypoint,
    WorldConfig,
    step,
)


@dataclass
class ScriptedPlan:
    """Eight fixed waypoints per brick; no gate conditions anywhere."""

    brick_id: int
    slot_index: int
    waypoints: list  # exactly 8 Waypoints

    STAGES = ("approach", "open_descend", "close", "lift", "transit",
              "descend_fixed", "open", "retract")

    def __post_init__(self):
        if len(self.waypoints) != 8:
            raise ValueError("a scripted plan is exactly 8 waypoints per brick")


def _fold_half_pi(yaw: float) -> float:
    y = yaw % math.pi
    if y > math.pi / 2:
        y -= math.pi
    return y


def build_scripted_plan(brick, slot, tol: Tolerances, config: WorldConfig) -> ScriptedPlan:
    """Precompute all eight waypoints from nominal geometry, open loop."""
    hx, hy, hz = (float(v) for v in brick.half_extents)
    pick_yaw = _fold_half_pi(brick.pose.r.yaw())
    believed_offset = brick.pose.r.yaw() - pick_yaw  # multiple of pi
    place_yaw = slot.pose.r.yaw() - believed_offset
    px, py, pz = (float(v) for v in brick.pose.t)
    sx, sy, sz = (float(v) for v in slot.pose.t)
    w_open = 2 * min(hx, hy) + tol.grip_margin
    release_z = sz + config.classical_release_drop
    wps = [
        Waypoint(Pose([px, py, pz + hz + config.approach_height],
                      Rotation.from_yaw(pick_yaw)), GripperCommand.hold(), 1),
        Waypoint(Pose([px, py, pz], Rotation.from_yaw(pick_yaw)),
                 GripperCommand.open_to(w_open), 2),
        Waypoint(Pose([px, py, pz], Rotation.from_yaw(pick_yaw)),
                 GripperCommand.close(), 3),
        Waypoint(Pose([px, py, tol.h_safe], Rotation.from_yaw(pick_yaw)),
                 GripperCommand.hold(), 4),
        Waypoint(Pose([sx, sy, tol.h_safe], Rotation.from_yaw(place_yaw)),
                 GripperCommand.hold(), 5),
        Waypoint(Pose([sx, sy, release_z], Rotation.from_yaw(place_yaw)),
                 GripperCommand.hold(), 5),
        Waypoint(Pose([sx, sy, release_z], Rotation.from_yaw(place_yaw)),
                 GripperCommand.open_to(w_open), 6),
        Waypoint(Pose([sx, sy, tol.h_safe], Rotation.from_yaw(place_yaw)),
                 GripperCommand.hold(), 6),
    ]
    return ScriptedPlan(brick.id, slot.index, wps)


def classical_controller(scene: SceneState, goal: Goal,
                         tol: Tolerances | None = None,
                         config: WorldConfig | None = None,
                         perception: PerceptionModel | None = None,
                         log_header: dict | None = None) -> TrialLog:
    """Fixed hand-scripted pick-and-place: no contact thresholds, no collision
    checks, no retries. Descent depths and release heights come from nominal
    geometry read once from the initial perception snapshot.
    """
    tol = tol or Tolerances()
    config = config or WorldConfig()
    perception = perception or PerceptionModel()
    sc = scene.clone()
    perceived = perception.observe(sc)

    header = dict(log_header or {})
    header.setdefault("policy", "classical")
    header["gating"] = False
    header["goal"] = goal.to_jsonable()
    header["tolerances"] = tol.to_jsonable()
    log = TrialLog(header)

    assignments: dict[int, int] = {}
    used: set[int] = set()
    for slot in goal.slots:
        best, best_d = None, math.inf
        for b in perceived.bricks:
            if b.id in used or b.status != BrickStatus.FREE:
                continue
            d = float(np.linalg.norm(b.pose.t[:2] - slot.pose.t[:2]))
            if d < best_d:
                best, best_d = b.id, d
        if best is None:
            break
        assignments[slot.index] = best
        used.add(best)

    for cycle, slot in enumerate(goal.slots, start=1):
        if slot.index not in assignments:
            break
        brick_id = assignments[slot.index]
        plan = build_scripted_plan(perceived.brick(brick_id), slot, tol, config)
        for stage, wp in zip(ScriptedPlan.STAGES, plan.waypoints):
            start_tick = sc.tick
            sc, contacts, events = step(sc, wp, config, mu=tol.mu)
            log.append({
                "tick": start_tick,
                "end_tick": sc.tick,
                "cycle": cycle,
                "agent": None,
                "stage": stage,
                "attempt": 1,
                "sigma": None,
                "waypoint": wp.to_jsonable(),
                "tool_results": [],
                "gate_inputs": {},
                "retry_edge": None,
                "events": [e.to_jsonable() for e in events],
                "policy_source": "classical",
                "claimed_sigma": None,
                "note": "",
                "checkpoint": None,
            })

    toppled = sorted({ev["data"].get("brick")
                      for e in log.entries for ev in e["events"]
                      if ev["kind"] == "Toppled"})
    placed = sum(1 for b in sc.bricks if b.status == BrickStatus.PLACED)
    success = placed == len(goal.slots) and not toppled
    log.finish({
        "success": success,
        "bricks_placed": placed,
        "failure": None if success else {"reason": "open-loop outcome short of goal"},
        "slot_assignments": {str(k): v for k, v in assignments.items()},
        "final_poses": {str(b.id): b.pose.to_jsonable() for b in sc.bricks},
        "toppled": toppled,
        "policy": "classical",
    })
    return log


def single_agent_trial(scene: SceneState, goal: Goal,
                       tol: Tolerances | None = None,
                       config: WorldConfig | None = None,
                       perception: PerceptionModel | None = None,
                       faults: FaultPlan | None = None,
                       transport=None,
                       log_header: dict | None = None) -> TrialLog:
    """Ablation: one merged prompt per waypoint, stage gating removed.

    Stage checks, retry edges, and placement correction are disabled; the
    world still freezes physically impossible motion. The offline variant
    (no transport) reproduces the rule proposals deterministically.
    """
    tol = tol or Tolerances()
    config = config or WorldConfig()
    policy = SingleAgentPolicy(transport)
    return run_pipeline(scene, goal, policy, tol, config,
                        perception=perception, faults=faults, gating=False,
                        log_header={**(log_header or {}), "policy": "single_agent"})
