"""Experiment runner: seeded randomized trials, metric aggregation, persistence.

Per-brick placement quality is scored against the goal slots recorded in each
trial's slot assignment: Euclidean center offset, geodesic rotation error in
degrees, and exact oriented-box IoU. Per-trial values average over the six
bricks; global values average the per-trial means over the successful set.
"""

import csv
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .agents import RulePolicy, TrialLog, run_pipeline
from .baselines import classical_controller, single_agent_trial
from .checks import Tolerances
from .geometry import Obb, Pose, center_offset, obb_iou, rotation_error_deg
from .reasoner import LlmConfig, LlmPolicy, MockTransport, HttpChatTransport
from .world import (
    FaultPlan,
    Goal,
    Pattern,
    PerceptionModel,
    WorldConfig,
    build_scene,
    canonical_json,
    generate_goal,
    randomize_initial,
)


class PolicyKind(str, Enum):
    RULES = "rules"
    LLM = "llm"
    SINGLE_AGENT = "single-agent"
    CLASSICAL = "classical"


DEFAULT_GAPS = {Pattern.PYRAMID: 0.05, Pattern.GRID: 0.02}


@dataclass
class TrialConfig:
    pattern: Pattern = Pattern.PYRAMID
    trials: int = 10
    bricks: int = 6
    seed: int = 0
    policy: PolicyKind = PolicyKind.RULES
    gap: float | None = None
    noise_sigma: float = 0.0
    tolerances: Tolerances = field(default_factory=Tolerances)
    world: WorldConfig = field(default_factory=WorldConfig)
    llm: LlmConfig = field(default_factory=LlmConfig)
    faults: FaultPlan = field(default_factory=FaultPlan)
    record_checkpoints: bool = True

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.bricks != 6:
            raise ValueError("the stacking task uses exactly 6 bricks")

    def resolved_gap(self) -> float:
        return self.gap if self.gap is not None else DEFAULT_GAPS[self.pattern]

    def to_jsonable(self) -> dict:
        return {
            "pattern": self.pattern.value,
            "trials": self.trials,
            "bricks": self.bricks,
            "seed": self.seed,
            "policy": self.policy.value,
            "gap": self.gap,
            "noise_sigma": self.noise_sigma,
            "tolerances": self.tolerances.to_jsonable(),
            "world": self.world.to_jsonable(),
            "llm": self.llm.to_jsonable(),
            "faults": self.faults.to_jsonable(),
            "record_checkpoints": self.record_checkpoints,
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "TrialConfig":
        return cls(
            pattern=Pattern(d.get("pattern", "pyramid")),
            trials=d.get("trials", 10),
            bricks=d.get("bricks", 6),
            seed=d.get("seed", 0),
            policy=PolicyKind(d.get("policy", "rules")),
            gap=d.get("gap"),
            noise_sigma=d.get("noise_sigma", 0.0),
            tolerances=Tolerances.from_jsonable(d["tolerances"]) if "tolerances" in d else Tolerances(),
            world=WorldConfig.from_jsonable(d["world"]) if "world" in d else WorldConfig(),
            llm=LlmConfig.from_jsonable(d["llm"]) if "llm" in d else LlmConfig(),
            faults=FaultPlan.from_jsonable(d["faults"]) if "faults" in d else FaultPlan(),
            record_checkpoints=d.get("record_checkpoints", True),
        )


@dataclass
class TrialMetrics:
    trial: int
    seed: int
    success: bool
    e_ctr: float | None  # m, per-trial mean over bricks
    e_rot: float | None  # deg
    iou: float | None

    def to_jsonable(self) -> dict:
        return dict(self.__dict__)


@dataclass
class MetricsReport:
    pattern: str
    policy: str
    per_trial: list
    success_count: int
    err_ctr: float | None  # m, mean over the successful set
    err_rot: float | None  # deg
    iou: float | None

    def to_jsonable(self) -> dict:
        return {
            "pattern": self.pattern,
            "policy": self.policy,
            "per_trial": [t.to_jsonable() if isinstance(t, TrialMetrics) else t
                          for t in self.per_trial],
            "success_count": self.success_count,
            "err_ctr": self.err_ctr,
            "err_rot": self.err_rot,
            "iou": self.iou,
            "defined": self.success_count > 0,
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "MetricsReport":
        return cls(d["pattern"], d["policy"], d["per_trial"], d["success_count"],
                   d["err_ctr"], d["err_rot"], d["iou"])


def brick_metrics(final_pose: Pose, slot_pose: Pose, half_extents) -> tuple[float, float, float]:
    """(center offset m, rotation error deg, oriented IoU) for one brick."""
    e_ctr = center_offset(final_pose.t, slot_pose.t)
    e_rot = rotation_error_deg(final_pose.r, slot_pose.r)
    iou = obb_iou(
        Obb(final_pose.t, final_pose.r, half_extents),
        Obb(slot_pose.t, slot_pose.r, half_extents),
    )
    return e_ctr, e_rot, iou


def trial_metrics_from_log(log: TrialLog, goal: Goal, trial: int, seed: int) -> TrialMetrics:
    summary = log.summary
    success = bool(summary["success"])
    assignments = summary["slot_assignments"]
    if not assignments:
        return TrialMetrics(trial, seed, False, None, None, None)
    ctrs, rots, ious = [], [], []
    for slot_str, brick_id in assignments.items():
        slot = goal.slot(int(slot_str))
        final = Pose.from_jsonable(summary["final_poses"][str(brick_id)])
        half = goal.brick_half_extents
        e_ctr, e_rot, iou = brick_metrics(final, slot.pose, half)
        ctrs.append(e_ctr)
        rots.append(e_rot)
        ious.append(iou)
    return TrialMetrics(trial, seed, success,
                        float(np.mean(ctrs)), float(np.mean(rots)), float(np.mean(ious)))


def aggregate(per_trial: list, pattern: str, policy: str) -> MetricsReport:
    """Global means over the successful set; explicit 'undefined' when empty."""
    succ = [t for t in per_trial if t.success]
    if not succ:
        return MetricsReport(pattern, policy, per_trial, 0, None, None, None)
    return MetricsReport(
        pattern, policy, per_trial, len(succ),
        float(np.mean([t.e_ctr for t in succ])),
        float(np.mean([t.e_rot for t in succ])),
        float(np.mean([t.iou for t in succ])),
    )


def make_goal(config: TrialConfig) -> Goal:
    base = Pose.from_xyz_yaw(config.world.goal_base_xy[0], config.world.goal_base_xy[1], 0.0, 0.0)
    return generate_goal(config.pattern, config.world.brick_half_extents,
                         config.resolved_gap(), base)


def run_trial(config: TrialConfig, trial_index: int, transport=None) -> tuple[TrialLog, Goal]:
    """One seeded trial: randomized scene, selected policy, full log."""
    seed = config.seed + trial_index
    goal = make_goal(config)
    scene = randomize_initial(build_scene(config.world), seed, config.world, goal=goal)
    percept = PerceptionModel.from_seed(seed, [b.id for b in scene.bricks],
                                        config.noise_sigma, config.world)
    faults = FaultPlan.from_jsonable(config.faults.to_jsonable())  # fresh copy per trial
    header = {"trial": trial_index, "seed": seed, "pattern": config.pattern.value,
              "noise_sigma": config.noise_sigma}
    if config.policy == PolicyKind.CLASSICAL:
        log = classical_controller(scene, goal, config.tolerances, config.world,
                                   percept, log_header=header)
    elif config.policy == PolicyKind.SINGLE_AGENT:
        log = single_agent_trial(scene, goal, config.tolerances, config.world,
                                 percept, faults=faults, transport=transport,
                                 log_header=header)
    elif config.policy == PolicyKind.LLM:
        if transport is None:
            if not config.llm.endpoint:
                raise ValueError("llm policy needs an endpoint or a mock transport")
            transport = HttpChatTransport(config.llm)
        policy = LlmPolicy(transport, config.llm)
        log = run_pipeline(scene, goal, policy, config.tolerances, config.world,
                           perception=percept, faults=faults,
                           record_checkpoints=config.record_checkpoints,
                           log_header=header)
    else:
        log = run_pipeline(scene, goal, RulePolicy(), config.tolerances, config.world,
                           perception=percept, faults=faults,
                           record_checkpoints=config.record_checkpoints,
                           log_header=header)
    return log, goal


def run_experiment(config: TrialConfig, out_dir: str | Path | None = None,
                   transport=None) -> tuple[list, MetricsReport]:
    """All trials for one config; optionally persist JSONL logs and the report."""
    logs = []
    per_trial = []
    goal = make_goal(config)
    for t in range(config.trials):
        log, _ = run_trial(config, t, transport=transport)
        logs.append(log)
        per_trial.append(trial_metrics_from_log(log, goal, t, config.seed + t))
    report = aggregate(per_trial, config.pattern.value, config.policy.value)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for t, log in enumerate(logs):
            (out / f"trial_{t:03d}.jsonl").write_text(log.to_jsonl())
        (out / "report.json").write_text(canonical_json(report.to_jsonable()) + "\n")
        (out / "config.json").write_text(canonical_json(config.to_jsonable()) + "\n")
    return logs, report


def eval_logs(log_dir: str | Path) -> MetricsReport:
    """Recompute the metrics report from persisted JSONL logs."""
    out = Path(log_dir)
    files = sorted(out.glob("trial_*.jsonl"))
    if not files:
        raise FileNotFoundError(f"no trial logs under {out}")
    per_trial = []
    pattern = policy = None
    for i, f in enumerate(files):
        log = TrialLog.from_jsonl(f.read_text())
        goal = Goal.from_jsonable(log.header["goal"])
        pattern = log.header.get("pattern", goal.pattern.value)
        policy = log.header.get("policy", "unknown")
        seed = log.header.get("seed", i)
        per_trial.append(trial_metrics_from_log(log, goal, i, seed))
    return aggregate(per_trial, pattern, policy)


# ---------------------------------------------------------------------------
# Comparison table: rotation error (deg), center offset (cm), IoU (%).
# Unit conversions happen at formatting time only.
# ---------------------------------------------------------------------------


def _fmt(value: float | None, scale: float, digits: int) -> str:
    if value is None:
        return "n/a"
    from decimal import Decimal, ROUND_HALF_UP

    quant = Decimal(1).scaleb(-digits)
    return str(Decimal(str(value * scale)).quantize(quant, rounding=ROUND_HALF_UP))


def _pooled_average(by_pattern: dict, pattern_names) -> MetricsReport | None:
    """Average row: pooled global means over every successful trial.

    Falls back to the mean of pattern values when per-trial data is absent.
    """
    if "average" in by_pattern:
        return by_pattern["average"]
    trials = []
    for p in pattern_names:
        for t in by_pattern[p].per_trial:
            trials.append(t if isinstance(t, TrialMetrics)
                          else TrialMetrics(**{k: t[k] for k in
                                               ("trial", "seed", "success",
                                                "e_ctr", "e_rot", "iou")}))
    if trials:
        return aggregate(trials, "average", by_pattern[pattern_names[0]].policy)
    vals = [by_pattern[p] for p in pattern_names]
    if any(v.err_rot is None for v in vals):
        return None
    return MetricsReport("average", vals[0].policy, [], sum(v.success_count for v in vals),
                         float(np.mean([v.err_ctr for v in vals])),
                         float(np.mean([v.err_rot for v in vals])),
                         float(np.mean([v.iou for v in vals])))


def compare_table(reports: dict) -> tuple[str, list]:
    """Render {policy: {pattern: MetricsReport}} like the headline comparison.

    An explicit "average" entry (pooled over all trials of both patterns) is
    used when present; otherwise one is derived. Every policy must cover the
    same patterns. Returns (text table, CSV rows).
    """
    if len(reports) < 2:
        raise ValueError("need at least two policies to compare")
    patterns_by_policy = {
        p: tuple(sorted(k for k in r if k != "average")) for p, r in reports.items()
    }
    patterns = set(patterns_by_policy.values())
    if len(patterns) != 1:
        raise ValueError(f"mismatched patterns across reports: {patterns_by_policy}")
    pattern_names = list(patterns)[0]

    header = ["method"]
    for p in list(pattern_names) + ["average"]:
        header += [f"{p}_rot_deg", f"{p}_ctr_cm", f"{p}_iou_pct"]
    rows = [header]
    lines = []
    for policy, by_pattern in reports.items():
        cells = [policy]
        for p in pattern_names:
            r = by_pattern[p]
            cells += [_fmt(r.err_rot, 1.0, 3), _fmt(r.err_ctr, 100.0, 3),
                      _fmt(r.iou, 100.0, 2)]
        avg = _pooled_average(by_pattern, pattern_names)
        if avg is not None and avg.err_rot is not None:
            cells += [_fmt(avg.err_rot, 1.0, 3), _fmt(avg.err_ctr, 100.0, 3),
                      _fmt(avg.iou, 100.0, 2)]
        else:
            cells += ["n/a", "n/a", "n/a"]
        rows.append(cells)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    for r in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines), rows


def rows_to_csv(rows: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerows(rows)
    return buf.getvalue()
