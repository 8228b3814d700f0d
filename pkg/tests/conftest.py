import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from brickstack.geometry import Pose, Rotation
from brickstack.world import (
    Brick,
    BrickStatus,
    GripperState,
    SceneState,
    WorldConfig,
)


@pytest.fixture
def config() -> WorldConfig:
    return WorldConfig()


def make_scene(bricks, config: WorldConfig, gripper_pose: Pose | None = None,
               width: float | None = None) -> SceneState:
    gripper = GripperState(
        gripper_pose if gripper_pose is not None else Pose(np.array(config.ready_pose_xyz)),
        width=width if width is not None else config.max_width,
        max_width=config.max_width,
        finger_depth=config.finger_depth,
    )
    workspace = np.array([config.workspace_lo, config.workspace_hi])
    return SceneState(list(bricks), gripper, 0, workspace)


def make_brick(bid: int, x: float, y: float, config: WorldConfig, yaw: float = 0.0,
               z: float | None = None, status: BrickStatus = BrickStatus.FREE) -> Brick:
    h = np.array(config.brick_half_extents)
    zc = z if z is not None else float(h[2])
    return Brick(bid, h, config.brick_mass, Pose([x, y, zc], Rotation.from_yaw(yaw)), status)
