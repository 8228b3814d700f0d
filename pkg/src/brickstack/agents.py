"""The six-stage gated pipeline: per-stage checks, retry edges, and the trial log.

A brick cycle runs stages 1..6 in order; stage i+1 executes only if stage i's
acceptance bit is 1. Two recovery edges exist: a failed lift releases and
routes back to stage 1 (re-grasp), and a misaligned placement raises by a
fixed step, corrects by the measured residual, and repeats stage 5. Every
agent invocation appends one auditable record to the trial log.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import checks
from .checks import Tolerances, ToolResult
from .geometry import Pose, Rotation
from .world import (
    BrickStatus,
    FaultPlan,
    Goal,
    GripperCommand,
    PerceptionModel,
    SceneState,
    Waypoint,
    WorldConfig,
    canonical_json,
    step,
    support_gap,
)

ALIGNMENT_DEG_WEIGHT = 0.01  # meters of alignment cost per degree of yaw offset


class InfeasibleWidthError(ValueError):
    """The brick cannot be bracketed inside the gripper's opening limit."""


@dataclass(frozen=True)
class SelectionWeights:
    """Cost weights for candidate selection: shorter, clearer, better aligned."""

    w_len: float = 1.0
    w_clr: float = 0.5
    w_align: float = 2.0
    clearance_cap: float = 0.10  # m, clearance reward saturates here


@dataclass
class CandidateAction:
    waypoint: Waypoint
    path_length: float
    clearance: float
    alignment: float
    slot_index: int
    brick_id: int | None = None

    def cost(self, weights: SelectionWeights) -> float:
        return (
            weights.w_len * self.path_length
            - weights.w_clr * min(self.clearance, weights.clearance_cap)
            + weights.w_align * self.alignment
        )


def feasible_set(scene: SceneState, goal: Goal, candidates: list, tol: Tolerances,
                 config: WorldConfig) -> list:
    """Prune candidates by physics, reachability, and goal progress."""
    if not candidates:
        raise ValueError("candidate set must be non-empty")
    start = scene.gripper.pose
    kept = []
    for cand in candidates:
        path = checks.collision_free_path(scene, start, cand.waypoint.target,
                                          tol=tol, config=config)
        clear = checks.clearance(scene, cand.waypoint.target, tol=tol, config=config)
        reach = checks.reachable(cand.waypoint.target, scene.workspace, tol, config)
        progress = checks.goal_progress(scene, cand, goal, tol)
        if path.ok and clear.ok and reach.ok and progress.ok:
            kept.append(cand)
    return kept


def select_action(feasible: list, weights: SelectionWeights | None = None) -> CandidateAction:
    """Argmin of the trade-off cost; ties break to the lowest candidate index."""
    if not feasible:
        raise ValueError("cannot select from an empty feasible set")
    weights = weights or SelectionWeights()
    best = feasible[0]
    best_cost = best.cost(weights)
    for cand in feasible[1:]:
        c = cand.cost(weights)
        if c < best_cost:
            best, best_cost = cand, c
    return best


@dataclass
class Memory:
    """Task progress carried between agent invocations; fully serializable."""

    completed_bricks: list = field(default_factory=list)
    completed_slots: list = field(default_factory=list)
    current_brick: int | None = None
    current_slot: int | None = None
    current_step: int = 1
    cycle: int = 0
    retry_counters: dict = field(default_factory=lambda: {i: 0 for i in range(1, 7)})
    step_flags: dict = field(default_factory=lambda: {i: False for i in range(1, 7)})
    call_counts: dict = field(default_factory=lambda: {i: 0 for i in range(1, 7)})
    slot_assignments: dict = field(default_factory=dict)  # slot index -> brick id
    grasp_yaw: float | None = None
    grasp_width: float | None = None
    descend_target: dict | None = None
    place_target: dict | None = None

    def reset_cycle(self, brick_id: int, slot_index: int) -> None:
        self.current_brick = brick_id
        self.current_slot = slot_index
        self.current_step = 1
        self.cycle += 1
        self.retry_counters = {i: 0 for i in range(1, 7)}
        self.step_flags = {i: False for i in range(1, 7)}
        self.call_counts = {i: 0 for i in range(1, 7)}
        self.slot_assignments[slot_index] = brick_id
        self.grasp_yaw = None
        self.grasp_width = None
        self.descend_target = None
        self.place_target = None

    def restart_at_pregrasp(self) -> None:
        self.current_step = 1
        self.step_flags = {i: False for i in range(1, 7)}
        self.grasp_yaw = None
        self.grasp_width = None
        self.descend_target = None
        self.place_target = None

    def to_jsonable(self) -> dict:
        return {
            "completed_bricks": list(self.completed_bricks),
            "completed_slots": list(self.completed_slots),
            "current_brick": self.current_brick,
            "current_slot": self.current_slot,
            "current_step": self.current_step,
            "cycle": self.cycle,
            "retry_counters": {str(k): v for k, v in self.retry_counters.items()},
            "step_flags": {str(k): v for k, v in self.step_flags.items()},
            "call_counts": {str(k): v for k, v in self.call_counts.items()},
            "slot_assignments": {str(k): v for k, v in self.slot_assignments.items()},
            "grasp_yaw": self.grasp_yaw,
            "grasp_width": self.grasp_width,
            "descend_target": self.descend_target,
            "place_target": self.place_target,
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "Memory":
        return cls(
            completed_bricks=list(d["completed_bricks"]),
            completed_slots=list(d["completed_slots"]),
            current_brick=d["current_brick"],
            current_slot=d["current_slot"],
            current_step=d["current_step"],
            cycle=d["cycle"],
            retry_counters={int(k): v for k, v in d["retry_counters"].items()},
            step_flags={int(k): v for k, v in d["step_flags"].items()},
            call_counts={int(k): v for k, v in d["call_counts"].items()},
            slot_assignments={int(k): v for k, v in d["slot_assignments"].items()},
            grasp_yaw=d["grasp_yaw"],
            grasp_width=d["grasp_width"],
            descend_target=d["descend_target"],
            place_target=d["place_target"],
        )


@dataclass
class AgentMessage:
    agent: int
    rationale: str
    proposal: Pose | None = None
    constraints: list = field(default_factory=list)  # ToolResults consulted


@dataclass
class AgentOutcome:
    message: AgentMessage
    y: Waypoint | None
    sigma: int | None
    memory_next: Memory


@dataclass
class Proposal:
    waypoint: Waypoint
    rationale: str = ""
    source: str = "rules"
    claimed_sigma: int | None = None


class RulePolicy:
    """Deterministic reference policy: always adopts the nominal proposal."""

    name = "rules"

    def propose(self, agent_index: int, ctx: "TrialContext", nominal_fn) -> Proposal:
        return Proposal(nominal_fn(), rationale="rule nominal", source="rules")


class TrialLog:
    """Header + one record per agent invocation + summary, JSONL on disk."""

    def __init__(self, header: dict | None = None):
        self.header = header or {}
        self.entries: list[dict] = []
        self.summary: dict | None = None

    def append(self, entry: dict) -> None:
        self.entries.append(entry)

    def finish(self, summary: dict) -> None:
        self.summary = summary

    def to_jsonl(self) -> str:
        lines = [canonical_json({"type": "header", **self.header})]
        lines += [canonical_json({"type": "entry", **e}) for e in self.entries]
        if self.summary is not None:
            lines.append(canonical_json({"type": "summary", **self.summary}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "TrialLog":
        import json

        log = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.pop("type")
            if kind == "header":
                log.header = rec
            elif kind == "entry":
                log.entries.append(rec)
            elif kind == "summary":
                log.summary = rec
            else:
                raise ValueError(f"unknown record type {kind!r}")
        return log

    def entry_lines(self, start: int = 0) -> list[str]:
        return [canonical_json({"type": "entry", **e}) for e in self.entries[start:]]


@dataclass
class TrialContext:
    scene: SceneState
    goal: Goal
    tol: Tolerances
    config: WorldConfig
    policy: object
    perception: PerceptionModel
    faults: FaultPlan
    memory: Memory
    log: TrialLog
    gating: bool = True
    record_checkpoints: bool = True
    _entry_events: list = field(default_factory=list)
    _entry_start_tick: int = 0
    _entry_checkpoint: dict | None = None

    def perceived(self) -> SceneState:
        return self.perception.observe(self.scene)

    def snapshot(self) -> dict:
        return {
            "scene": self.scene.to_jsonable(),
            "memory": self.memory.to_jsonable(),
            "perception": self.perception.to_jsonable(),
            "faults": self.faults.to_jsonable(),
        }

    def begin_entry(self, agent: int) -> None:
        self._entry_events = []
        self._entry_start_tick = self.scene.tick
        self._entry_checkpoint = self.snapshot() if self.record_checkpoints else None
        self.memory.call_counts[agent] = self.memory.call_counts.get(agent, 0) + 1

    def execute(self, waypoint: Waypoint) -> tuple[list, list]:
        scene2, contacts, events = step(self.scene, waypoint, self.config, mu=self.tol.mu)
        self.scene = scene2
        self._entry_events.extend(events)
        return contacts, events

    def finish_entry(self, agent: int, sigma, waypoint: Waypoint | None,
                     tool_results: list | None = None, gate_inputs: dict | None = None,
                     retry_edge: dict | None = None, source: str = "rules",
                     claimed_sigma: int | None = None, note: str = "") -> dict:
        if source == "fallback" and not note:
            note = "policy fell back to the rule proposal"
        entry = {
            "tick": self._entry_start_tick,
            "end_tick": self.scene.tick,
            "cycle": self.memory.cycle,
            "agent": agent,
            "attempt": self.memory.call_counts.get(agent, 1),
            "sigma": sigma if self.gating else None,
            "waypoint": waypoint.to_jsonable() if waypoint is not None else None,
            "tool_results": [t.to_jsonable() for t in (tool_results or [])],
            "gate_inputs": gate_inputs or {},
            "retry_edge": retry_edge,
            "events": [e.to_jsonable() for e in self._entry_events],
            "policy_source": source,
            "claimed_sigma": claimed_sigma,
            "note": note,
            "checkpoint": self._entry_checkpoint,
        }
        self.log.append(entry)
        return entry


def _fold_half_pi(yaw: float) -> float:
    y = yaw % math.pi
    if y > math.pi / 2:
        y -= math.pi
    return y


def _grasp_yaw_for(brick) -> float:
    """Gripper yaw closing across the brick's shorter horizontal axis."""
    yaw = brick.pose.r.yaw()
    if brick.half_extents[1] <= brick.half_extents[0]:
        return _fold_half_pi(yaw)
    return _fold_half_pi(yaw + math.pi / 2)


def _grasp_width_for(brick) -> float:
    return 2.0 * float(min(brick.half_extents[0], brick.half_extents[1]))


def _perturbed_candidates(nominal: Waypoint, slot_index: int, brick_id: int,
                          perceived: SceneState, tol: Tolerances,
                          config: WorldConfig) -> list:
    """Nominal plus 8 lateral/rotated variants (+-2 cm, +-5 deg)."""
    variants = [(0.0, 0.0, 0.0)]
    d = 0.02
    variants += [(d, 0, 0), (-d, 0, 0), (0, d, 0), (0, -d, 0), (d, d, 0), (-d, -d, 0)]
    variants += [(0, 0, math.radians(5)), (0, 0, -math.radians(5))]
    cands = []
    for dx, dy, dyaw in variants:
        target = Pose(nominal.target.t + np.array([dx, dy, 0.0]),
                      Rotation.from_yaw(dyaw) * nominal.target.r)
        wp = Waypoint(target, nominal.command, nominal.phase)
        clear = checks.clearance(perceived, target, tol=tol, config=config)
        cands.append(CandidateAction(
            waypoint=wp,
            path_length=float(np.linalg.norm(target.t - perceived.gripper.pose.t)),
            clearance=clear.value,
            alignment=math.hypot(dx, dy) + abs(math.degrees(dyaw)) * ALIGNMENT_DEG_WEIGHT,
            slot_index=slot_index,
            brick_id=brick_id,
        ))
    return cands


# ---------------------------------------------------------------------------
# The six agents. Each takes the trial context, appends exactly one log entry
# per attempt, and returns an AgentOutcome.
# ---------------------------------------------------------------------------


def agent1_pregrasp(ctx: TrialContext) -> AgentOutcome:
    """Propose an approach pose above the brick; gate on path and clearance."""
    ctx.begin_entry(1)
    memory = ctx.memory
    perceived = ctx.perceived()
    brick = perceived.brick(memory.current_brick)
    if ctx.scene.brick(brick.id).status != BrickStatus.FREE:
        raise ValueError(f"brick {brick.id} is not free to grasp")

    def nominal() -> Waypoint:
        gyaw = _grasp_yaw_for(brick)
        top = float(brick.pose.t[2] + brick.half_extents[2])
        target = Pose([float(brick.pose.t[0]), float(brick.pose.t[1]),
                       top + ctx.config.approach_height], Rotation.from_yaw(gyaw))
        return Waypoint(target, GripperCommand.hold(), 1)

    proposal = ctx.policy.propose(1, ctx, nominal)
    wp = proposal.waypoint
    path = checks.collision_free_path(perceived, perceived.gripper.pose, wp.target,
                                      tol=ctx.tol, config=ctx.config)
    clear = checks.clearance(perceived, wp.target, tol=ctx.tol, config=ctx.config)
    tools = [path, clear]
    sigma = 1 if (path.ok and clear.ok) else 0
    note = ""
    if sigma == 0 and ctx.gating:
        cands = _perturbed_candidates(wp, memory.current_slot, brick.id, perceived,
                                      ctx.tol, ctx.config)
        feas = feasible_set(perceived, ctx.goal, cands, ctx.tol, ctx.config)
        if feas:
            chosen = select_action(feas)
            wp = chosen.waypoint
            sigma = 1
            note = f"nominal gate failed; selected among {len(feas)} feasible variants"
    if sigma == 1 or not ctx.gating:
        memory.grasp_yaw = wp.target.r.yaw()
        ctx.execute(wp)
    ctx.finish_entry(1, sigma, wp, tools, gate_inputs={
        "path_ok": path.ok, "clearance": clear.value,
        "clearance_min": ctx.tol.clearance_min,
    }, source=proposal.source, claimed_sigma=proposal.claimed_sigma, note=note)
    msg = AgentMessage(1, proposal.rationale or "approach above brick", wp.target, tools)
    return AgentOutcome(msg, wp, sigma, memory)


def agent2_descend_open(ctx: TrialContext) -> AgentOutcome:
    """Open to brick width plus margin, descend to the grasp depth."""
    ctx.begin_entry(2)
    memory = ctx.memory
    perceived = ctx.perceived()
    brick = perceived.brick(memory.current_brick)
    w_brick = _grasp_width_for(brick)
    w_cmd = w_brick + ctx.tol.grip_margin
    if w_cmd > ctx.scene.gripper.max_width:
        raise InfeasibleWidthError(
            f"needed opening {w_cmd:.3f} m exceeds max width "
            f"{ctx.scene.gripper.max_width:.3f} m")

    def nominal() -> Waypoint:
        gyaw = memory.grasp_yaw if memory.grasp_yaw is not None else _grasp_yaw_for(brick)
        target = Pose([float(brick.pose.t[0]), float(brick.pose.t[1]),
                       float(brick.pose.t[2])], Rotation.from_yaw(gyaw))
        return Waypoint(target, GripperCommand.open_to(w_cmd), 2)

    proposal = ctx.policy.propose(2, ctx, nominal)
    wp = proposal.waypoint
    descent = checks.collision_free_path(
        perceived, perceived.gripper.pose, wp.target,
        tol=ctx.tol, config=ctx.config, width=w_cmd)
    sigma = 1 if descent.ok else 0
    if sigma == 1 or not ctx.gating:
        memory.descend_target = wp.target.to_jsonable()
        memory.grasp_width = w_cmd
        ctx.execute(wp)
    ctx.finish_entry(2, sigma, wp, [descent], gate_inputs={
        "width_cmd": w_cmd, "width_needed": w_brick + ctx.tol.grip_margin,
        "max_width": ctx.scene.gripper.max_width, "sidewalls_clear": descent.ok,
    }, source=proposal.source, claimed_sigma=proposal.claimed_sigma)
    msg = AgentMessage(2, proposal.rationale or "open and descend", wp.target, [descent])
    return AgentOutcome(msg, wp, sigma, memory)


def agent3_grasp(ctx: TrialContext) -> AgentOutcome:
    """Close the gripper; gate on finger forces and the achieved pose error."""
    ctx.begin_entry(3)
    memory = ctx.memory
    force = ctx.faults.grasp_force_for(memory.cycle, ctx.config.grip_force)
    ctx.scene.gripper.grip_normal_force = force

    def nominal() -> Waypoint:
        return Waypoint(ctx.scene.gripper.pose, GripperCommand.close(), 3)

    proposal = ctx.policy.propose(3, ctx, nominal)
    wp = proposal.waypoint
    contacts, _ = ctx.execute(wp)
    finger_contacts = [c for c in contacts if c.bodies[1] == memory.current_brick]
    pose_err = 0.0
    if memory.descend_target is not None:
        commanded = Pose.from_jsonable(memory.descend_target)
        pose_err = float(np.linalg.norm(ctx.scene.gripper.pose.t - commanded.t))
    tools: list[ToolResult] = []
    if len(finger_contacts) == 2:
        result = checks.grasp_stable(finger_contacts[0], finger_contacts[1], pose_err, ctx.tol)
        tools.append(result)
        sigma = 1 if result.ok else 0
    else:
        sigma = 0
    if sigma == 1:
        ctx.perception.mark_refined(memory.current_brick)
    forces = sorted(c.normal_force for c in finger_contacts)
    ctx.finish_entry(3, sigma, wp, tools, gate_inputs={
        "finger_forces": forces, "pose_err": pose_err,
        "f_min": ctx.tol.f_min, "grasp_err_tol": ctx.tol.grasp_err_tol,
        "n_contacts": len(finger_contacts),
    }, source=proposal.source, claimed_sigma=proposal.claimed_sigma)
    msg = AgentMessage(3, proposal.rationale or "close and verify grasp", None, tools)
    return AgentOutcome(msg, wp, sigma, memory)


def agent4_lift(ctx: TrialContext) -> AgentOutcome:
    """Lift to the safe height and evaluate slip risk; slip routes to re-grasp."""
    ctx.begin_entry(4)
    memory = ctx.memory
    from .world import slip_state

    def nominal() -> Waypoint:
        p = ctx.scene.gripper.pose
        target = Pose([float(p.t[0]), float(p.t[1]), ctx.tol.h_safe], p.r)
        return Waypoint(target, GripperCommand.hold(), 4)

    proposal = ctx.policy.propose(4, ctx, nominal)
    wp = proposal.waypoint
    ctx.execute(wp)
    brick = ctx.scene.attached()
    if brick is None:
        ctx.finish_entry(4, 0, wp, [], gate_inputs={"n_contacts": 0},
                         source=proposal.source, claimed_sigma=proposal.claimed_sigma,
                         note="no brick attached at lift")
        return AgentOutcome(AgentMessage(4, "nothing held", None, []), wp, 0, memory)
    f_t, f_n_total, v_rel = slip_state(ctx.scene, ctx.config, ctx.tol.mu)
    result = checks.slip_check(brick.mass, f_n_total, v_rel, ctx.tol)
    sigma = 1 if result.ok else 0
    retry_edge = None
    if ctx.gating and sigma == 0 and memory.retry_counters[4] < ctx.tol.max_retries:
        # Release, let the brick settle back down, and route to re-grasp.
        release = Waypoint(ctx.scene.gripper.pose,
                           GripperCommand.open_to(memory.grasp_width or ctx.scene.gripper.max_width), 4)
        ctx.execute(release)
        dropped = ctx.scene.brick(memory.current_brick)
        dropped.status = BrickStatus.FREE  # back in play for the re-grasp
        memory.retry_counters[4] += 1
        memory.restart_at_pregrasp()
        retry_edge = {"kind": "ag4_to_ag1", "retry": memory.retry_counters[4]}
    ctx.finish_entry(4, sigma, wp, [result], gate_inputs={
        "mass": brick.mass, "f_n_total": f_n_total, "v_rel": v_rel,
        "mu": ctx.tol.mu, "v_th": ctx.tol.v_th,
    }, retry_edge=retry_edge, source=proposal.source, claimed_sigma=proposal.claimed_sigma)
    msg = AgentMessage(4, proposal.rationale or "lift to safe height", wp.target, [result])
    return AgentOutcome(msg, wp, sigma, memory)


def agent5_place(ctx: TrialContext) -> AgentOutcome:
    """Transit above the slot, descend to contact, gate on alignment.

    A misaligned contact raises by the configured step, corrects the next
    approach by the measured planar/yaw residual, and repeats.
    """
    ctx.begin_entry(5)
    memory = ctx.memory
    slot = ctx.goal.slot(memory.current_slot)
    rel = ctx.scene.gripper.attached_rel or Pose.identity()

    def nominal() -> Waypoint:
        if memory.place_target is None:
            bias = ctx.faults.placement_bias_xy
            brick_target = Pose(np.array(slot.pose.t) + np.array([bias[0], bias[1], 0.0]),
                                slot.pose.r)
        else:
            brick_target = Pose.from_jsonable(memory.place_target)
        gripper_target = brick_target * rel.inverse()
        return Waypoint(gripper_target, GripperCommand.hold(), 5)

    proposal = ctx.policy.propose(5, ctx, nominal)
    wp = proposal.waypoint
    # The commanded landing pose, implied by whichever proposal won; later
    # corrections adjust this target by the measured residual.
    memory.place_target = (wp.target * rel).to_jsonable()
    transit = Waypoint(Pose([float(wp.target.t[0]), float(wp.target.t[1]), ctx.tol.h_safe],
                            wp.target.r), GripperCommand.hold(), 5)
    ctx.execute(transit)
    ctx.execute(wp)
    brick = ctx.scene.brick(memory.current_brick)
    d_perp = support_gap(ctx.scene, brick.id)
    result = checks.placement_aligned(brick.pose, slot.pose, d_perp, ctx.tol)
    e_xy_vec = brick.pose.t[:2] - slot.pose.t[:2]
    e_yaw = checks.signed_yaw_correction(brick.pose, slot.pose)
    sigma = 1 if result.ok else 0
    retry_edge = None
    if ctx.gating and sigma == 0 and memory.retry_counters[5] < ctx.tol.max_retries:
        from_z = float(ctx.scene.gripper.pose.t[2])
        raise_wp = Waypoint(Pose(ctx.scene.gripper.pose.t + np.array([0.0, 0.0, ctx.tol.raise_step]),
                                 ctx.scene.gripper.pose.r), GripperCommand.hold(), 5)
        ctx.execute(raise_wp)
        old_target = Pose.from_jsonable(memory.place_target)
        corrected = Pose(
            old_target.t - np.array([float(e_xy_vec[0]), float(e_xy_vec[1]), 0.0]),
            Rotation.from_yaw(-math.radians(e_yaw)) * old_target.r,
        )
        memory.place_target = corrected.to_jsonable()
        memory.retry_counters[5] += 1
        retry_edge = {
            "kind": "ag5_raise",
            "from_z": from_z,
            "to_z": float(ctx.scene.gripper.pose.t[2]),
            "retry": memory.retry_counters[5],
        }
    ctx.finish_entry(5, sigma, wp, [result], gate_inputs={
        "d_perp": d_perp,
        "e_xy": float(np.linalg.norm(e_xy_vec)),
        "e_theta": checks.yaw_error_deg(brick.pose, slot.pose),
        "perp_tol": ctx.tol.perp_tol, "xy_tol": ctx.tol.xy_tol,
        "yaw_tol_deg": ctx.tol.yaw_tol_deg,
    }, retry_edge=retry_edge, source=proposal.source, claimed_sigma=proposal.claimed_sigma)
    msg = AgentMessage(5, proposal.rationale or "place at slot", wp.target, [result])
    return AgentOutcome(msg, wp, sigma, memory)


def agent6_release_retract(ctx: TrialContext) -> AgentOutcome:
    """Open, settle the brick, pop up, and retract home along a checked path."""
    ctx.begin_entry(6)
    memory = ctx.memory
    width = memory.grasp_width or ctx.scene.gripper.max_width
    release = Waypoint(ctx.scene.gripper.pose, GripperCommand.open_to(width), 6)
    ctx.execute(release)
    popup = Waypoint(Pose([float(ctx.scene.gripper.pose.t[0]),
                           float(ctx.scene.gripper.pose.t[1]), ctx.tol.h_safe],
                          ctx.scene.gripper.pose.r), GripperCommand.hold(), 6)
    ctx.execute(popup)
    ready = Pose(np.array(ctx.config.ready_pose_xyz))

    def nominal() -> Waypoint:
        return Waypoint(ready, GripperCommand.hold(), 6)

    proposal = ctx.policy.propose(6, ctx, nominal)
    wp = proposal.waypoint
    perceived = ctx.perceived()
    path = checks.collision_free_path(perceived, ctx.scene.gripper.pose, wp.target,
                                      tol=ctx.tol, config=ctx.config)
    sigma = 1 if path.ok else 0
    retry_edge = None
    if sigma == 1 or not ctx.gating:
        ctx.execute(wp)
        ctx.finish_entry(6, sigma, wp, [path], gate_inputs={"path_ok": path.ok},
                         source=proposal.source, claimed_sigma=proposal.claimed_sigma)
    else:
        # One fallback: raise to the home altitude, then go home.
        retry_edge = {"kind": "ag6_raise_home"}
        ctx.finish_entry(6, 0, wp, [path], gate_inputs={"path_ok": path.ok},
                         retry_edge=retry_edge,
                         source=proposal.source, claimed_sigma=proposal.claimed_sigma)
        ctx.begin_entry(6)
        raise_wp = Waypoint(Pose([float(ctx.scene.gripper.pose.t[0]),
                                  float(ctx.scene.gripper.pose.t[1]), float(ready.t[2])],
                                 ctx.scene.gripper.pose.r), GripperCommand.hold(), 6)
        ctx.execute(raise_wp)
        perceived = ctx.perceived()
        path2 = checks.collision_free_path(perceived, ctx.scene.gripper.pose, wp.target,
                                           tol=ctx.tol, config=ctx.config)
        sigma = 1 if path2.ok else 0
        if sigma == 1:
            ctx.execute(wp)
        ctx.finish_entry(6, sigma, wp, [path2], gate_inputs={"path_ok": path2.ok},
                         source=proposal.source, claimed_sigma=proposal.claimed_sigma,
                         note="raise-then-home fallback")
    if sigma == 1 or not ctx.gating:
        memory.completed_bricks.append(memory.current_brick)
        memory.completed_slots.append(memory.current_slot)
        memory.current_brick = None
        memory.current_slot = None
        memory.current_step = 1
    msg = AgentMessage(6, proposal.rationale or "release and retract", wp.target, [])
    return AgentOutcome(msg, wp, sigma, memory)


AGENT_FNS = {
    1: agent1_pregrasp,
    2: agent2_descend_open,
    3: agent3_grasp,
    4: agent4_lift,
    5: agent5_place,
    6: agent6_release_retract,
}


def run_pipeline(scene: SceneState, goal: Goal, policy, tol: Tolerances,
                 config: WorldConfig | None = None,
                 perception: PerceptionModel | None = None,
                 faults: FaultPlan | None = None,
                 gating: bool = True,
                 record_checkpoints: bool = True,
                 resume: dict | None = None,
                 log_header: dict | None = None,
                 max_invocations: int = 600) -> TrialLog:
    """Drive brick cycles through the gated stages until done or failed.

    Pass `resume` (a log entry's checkpoint) to continue a serialized trial;
    the produced entries are then byte-comparable with the original's suffix.
    """
    config = config or WorldConfig()
    if resume is not None:
        scene = SceneState.from_jsonable(resume["scene"])
        memory = Memory.from_jsonable(resume["memory"])
        perception = PerceptionModel.from_jsonable(resume["perception"])
        faults = FaultPlan.from_jsonable(resume["faults"])
    else:
        scene = scene.clone()
        memory = Memory()
        perception = perception or PerceptionModel()
        faults = faults or FaultPlan()

    header = dict(log_header or {})
    header.setdefault("policy", getattr(policy, "name", "unknown"))
    header.setdefault("gating", gating)
    header["goal"] = goal.to_jsonable()
    header["tolerances"] = tol.to_jsonable()
    log = TrialLog(header)
    ctx = TrialContext(scene, goal, tol, config, policy, perception, faults,
                       memory, log, gating, record_checkpoints)

    failure = None
    invocations = 0
    while True:
        if memory.current_brick is None:
            nxt = _next_unfilled_slot(ctx)
            if nxt is None:
                break  # all slots done
            slot_index = nxt
            brick_id = _nearest_free_brick(ctx, slot_index)
            if brick_id is None:
                failure = {"cycle": memory.cycle + 1, "agent": 0, "reason": "no free brick"}
                break
            memory.reset_cycle(brick_id, slot_index)
        invocations += 1
        if invocations > max_invocations:
            failure = {"cycle": memory.cycle, "agent": memory.current_step,
                       "reason": "invocation budget exhausted"}
            break
        step_index = memory.current_step
        outcome = AGENT_FNS[step_index](ctx)
        if not ctx.gating:
            _advance(memory, step_index)
            continue
        if outcome.sigma == 1:
            memory.step_flags[step_index] = True
            _advance(memory, step_index)
            continue
        # Gate failed: retry edges or cycle failure.
        last = log.entries[-1]
        if last.get("retry_edge"):
            continue  # the agent already rerouted (ag4 -> ag1, ag5 raise)
        failure = {"cycle": memory.cycle, "agent": step_index, "reason": "gate failed"}
        break

    success = failure is None and len(memory.completed_slots) == len(goal.slots)
    if success:
        assigned = [memory.slot_assignments.get(s.index) for s in goal.slots]
        success = all(
            b is not None and ctx.scene.brick(b).status == BrickStatus.PLACED
            for b in assigned
        )
        if not success:
            failure = {"cycle": memory.cycle, "agent": 6, "reason": "brick not placed"}
    toppled = _toppled_bricks(log)
    if toppled:
        success = False
    log.finish({
        "success": success,
        "bricks_placed": sum(1 for b in ctx.scene.bricks if b.status == BrickStatus.PLACED),
        "failure": failure,
        "slot_assignments": {str(k): v for k, v in memory.slot_assignments.items()},
        "final_poses": {str(b.id): b.pose.to_jsonable() for b in ctx.scene.bricks},
        "toppled": toppled,
        "policy": getattr(policy, "name", "unknown"),
    })
    return log


def _advance(memory: Memory, step_index: int) -> None:
    if step_index < 6:
        memory.current_step = step_index + 1
    elif memory.current_brick is not None:
        # Ungated variant completes the cycle here.
        memory.completed_bricks.append(memory.current_brick)
        memory.completed_slots.append(memory.current_slot)
        memory.current_brick = None
        memory.current_slot = None
        memory.current_step = 1


def _next_unfilled_slot(ctx: TrialContext) -> int | None:
    for slot in ctx.goal.slots:
        if slot.index not in ctx.memory.completed_slots:
            return slot.index
    return None


def _nearest_free_brick(ctx: TrialContext, slot_index: int) -> int | None:
    perceived = ctx.perceived()
    slot = ctx.goal.slot(slot_index)
    best = None
    best_d = math.inf
    for b in perceived.bricks:
        if b.status != BrickStatus.FREE:
            continue
        d = float(np.linalg.norm(b.pose.t[:2] - slot.pose.t[:2]))
        if d < best_d - 1e-12 or (abs(d - best_d) <= 1e-12 and (best is None or b.id < best)):
            best, best_d = b.id, d
    return best


def _toppled_bricks(log: TrialLog) -> list:
    out = []
    for e in log.entries:
        for ev in e.get("events", []):
            if ev.get("kind") == "Toppled":
                out.append(ev["data"].get("brick"))
    return sorted(set(out))


# ---------------------------------------------------------------------------
# Log auditors: the invariants are assertable on the serialized record alone.
# ---------------------------------------------------------------------------


def audit_gating(log: TrialLog) -> list[str]:
    """Check stage ordering: agent i+1 never runs without sigma_i = 1 before it.

    Also verifies both retry edges: a failed lift is followed by a pregrasp
    record (or trial failure); a failed placement raises by exactly the
    configured step (or trial failure).
    """
    violations: list[str] = []
    raise_step = log.header.get("tolerances", {}).get("raise_step")
    expected = 1
    cycle = 0
    for i, e in enumerate(log.entries):
        agent = e["agent"]
        if agent is None:
            violations.append(f"entry {i}: missing agent index")
            continue
        if e["cycle"] != cycle:
            if e["cycle"] != cycle + 1:
                violations.append(f"entry {i}: cycle jumped {cycle} -> {e['cycle']}")
            cycle = e["cycle"]
            expected = 1
        if agent != expected:
            violations.append(
                f"entry {i}: agent {agent} ran while expecting {expected} (cycle {cycle})")
        sigma = e["sigma"]
        edge = e.get("retry_edge") or {}
        if sigma == 1:
            expected = agent + 1 if agent < 6 else 1
        elif sigma == 0:
            kind = edge.get("kind")
            rest = log.entries[i + 1:]
            nxt = rest[0] if rest else None
            if agent == 4:
                if kind == "ag4_to_ag1":
                    expected = 1
                    if nxt is not None and (nxt["agent"] != 1 or nxt["cycle"] != cycle):
                        violations.append(f"entry {i}: slip retry not followed by pregrasp")
                elif nxt is not None:
                    violations.append(f"entry {i}: sigma4=0 without re-grasp edge or failure")
            elif agent == 5:
                if kind == "ag5_raise":
                    expected = 5
                    if raise_step is not None:
                        dz = e["retry_edge"]["to_z"] - e["retry_edge"]["from_z"]
                        if abs(dz - raise_step) > 1e-9:
                            violations.append(
                                f"entry {i}: raise of {dz:.4f} m != configured {raise_step} m")
                    if nxt is not None and (nxt["agent"] != 5 or nxt["cycle"] != cycle):
                        violations.append(f"entry {i}: raise not followed by a place retry")
                elif nxt is not None:
                    violations.append(f"entry {i}: sigma5=0 without raise edge or failure")
            elif agent == 6 and kind == "ag6_raise_home":
                expected = 6
            elif nxt is not None:
                violations.append(
                    f"entry {i}: sigma{agent}=0 but the trial continued without an edge")
        else:
            # Ungated logs carry sigma = None; ordering still applies.
            expected = agent + 1 if agent < 6 else 1
    if log.summary is not None and log.summary.get("success"):
        per_cycle: dict[int, dict[int, int]] = {}
        for e in log.entries:
            if e["sigma"] is not None:
                per_cycle.setdefault(e["cycle"], {})[e["agent"]] = e["sigma"]
        for c, sigmas in per_cycle.items():
            if sorted(sigmas) != [1, 2, 3, 4, 5, 6] or any(v != 1 for v in sigmas.values()):
                violations.append(f"cycle {c}: success without all six final sigmas = 1")
    return violations


def audit_verifier_supremacy(log: TrialLog, tol: Tolerances) -> list[str]:
    """Recompute each gate from the logged record; it must equal logged sigma."""
    violations: list[str] = []
    for i, e in enumerate(log.entries):
        agent = e["agent"]
        sigma = e["sigma"]
        if sigma is None:
            continue
        gi = e.get("gate_inputs", {})
        recomputed = None
        if agent == 1:
            recomputed = 1 if (gi.get("path_ok") and gi.get("clearance", 0.0) >= tol.clearance_min) else 0
            if sigma == 1 and recomputed == 0 and e.get("note"):
                recomputed = 1  # feasible-set fallback selected a passing variant
        elif agent == 2:
            recomputed = 1 if (gi.get("sidewalls_clear")
                               and gi.get("width_cmd", 0.0) >= gi.get("width_needed", 0.0)
                               and gi.get("width_cmd", 0.0) <= gi.get("max_width", math.inf)) else 0
        elif agent == 3:
            forces = gi.get("finger_forces", [])
            recomputed = 1 if (len(forces) == 2 and min(forces) >= tol.f_min
                               and gi.get("pose_err", math.inf) <= tol.grasp_err_tol) else 0
        elif agent == 4:
            if "mass" in gi:
                f_t = gi["mass"] * 9.81
                recomputed = 1 if (f_t <= tol.mu * gi["f_n_total"] and gi["v_rel"] <= tol.v_th) else 0
            else:
                recomputed = 0
        elif agent == 5:
            recomputed = 1 if (gi.get("d_perp", math.inf) <= tol.perp_tol
                               and gi.get("e_xy", math.inf) <= tol.xy_tol
                               and gi.get("e_theta", math.inf) <= tol.yaw_tol_deg) else 0
        elif agent == 6:
            recomputed = 1 if gi.get("path_ok") else 0
        if recomputed is not None and recomputed != sigma:
            violations.append(
                f"entry {i}: agent {agent} logged sigma {sigma} but checks give {recomputed}")
    return violations
