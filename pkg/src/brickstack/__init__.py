"""Deterministic quasi-static brick stacking: simulator, gated pipeline, harness."""

__version__ = "0.1.0"

from .geometry import Obb, Pose, Rotation, center_offset, interpolate_pose, obb_iou, rotation_error_deg
from .world import (
    Brick,
    BrickStatus,
    Goal,
    GripperCommand,
    GripperState,
    Pattern,
    SceneState,
    Waypoint,
    WorldConfig,
    build_scene,
    generate_goal,
    randomize_initial,
    settle_release,
    step,
)
from .checks import Tolerances, ToolResult
from .agents import Memory, RulePolicy, TrialLog, run_pipeline
from .harness import MetricsReport, PolicyKind, TrialConfig, run_experiment

__all__ = [
    "Brick", "BrickStatus", "Goal", "GripperCommand", "GripperState", "Memory",
    "MetricsReport", "Obb", "Pattern", "PolicyKind", "Pose", "Rotation",
    "RulePolicy", "SceneState", "Tolerances", "ToolResult", "TrialConfig",
    "TrialLog", "Waypoint", "WorldConfig", "build_scene", "center_offset",
    "generate_goal", "interpolate_pose", "obb_iou", "randomize_initial",
    "rotation_error_deg", "run_experiment", "run_pipeline", "settle_release",
    "step",
]
