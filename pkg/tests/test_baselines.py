import math

import numpy as np
import pytest

from brickstack.agents import RulePolicy, run_pipeline
from brickstack.baselines import ScriptedPlan, build_scripted_plan, classical_controller, single_agent_trial
from brickstack.checks import Tolerances
from brickstack.geometry import Pose, center_offset
from brickstack.world import (
    FaultPlan,
    Pattern,
    PerceptionModel,
    Waypoint,
    WorldConfig,
    build_scene,
    generate_goal,
    randomize_initial,
)

BASE = Pose.from_xyz_yaw(0.0, 0.35, 0.0)


def setup(config, seed=23, pattern=Pattern.PYRAMID, gap=0.05, sigma=0.0):
    goal = generate_goal(pattern, config.brick_half_extents, gap, BASE)
    scene = randomize_initial(build_scene(config), seed, config, goal=goal)
    percept = PerceptionModel.from_seed(seed, [b.id for b in scene.bricks], sigma, config)
    return goal, scene, percept


class TestScriptedPlan:
    def test_eight_waypoints(self, config):
        goal, scene, _ = setup(config)
        plan = build_scripted_plan(scene.bricks[0], goal.slots[0], Tolerances(), config)
        assert len(plan.waypoints) == 8
        assert len(ScriptedPlan.STAGES) == 8
        assert all(isinstance(w, Waypoint) for w in plan.waypoints)

    def test_wrong_length_rejected(self, config):
        goal, scene, _ = setup(config)
        plan = build_scripted_plan(scene.bricks[0], goal.slots[0], Tolerances(), config)
        with pytest.raises(ValueError):
            ScriptedPlan(0, 0, plan.waypoints[:5])

    def test_release_height_is_slot_plus_drop(self, config):
        goal, scene, _ = setup(config)
        plan = build_scripted_plan(scene.bricks[0], goal.slots[0], Tolerances(), config)
        release = plan.waypoints[6]
        assert release.target.t[2] == pytest.approx(
            goal.slots[0].pose.t[2] + config.classical_release_drop)


class TestClassicalController:
    def test_noiseless_run_completes_with_drop_offsets(self, config):
        goal, scene, percept = setup(config, seed=23)
        log = classical_controller(scene, goal, Tolerances(), config, percept)
        assert log.summary["success"]
        assert log.summary["bricks_placed"] == 6
        # Open loop with perfect perception still lands on the slots.
        for s, b in log.summary["slot_assignments"].items():
            final = Pose.from_jsonable(log.summary["final_poses"][str(b)])
            assert center_offset(final.t, goal.slots[int(s)].pose.t) < 1e-6

    def test_gate_free_and_retry_free(self, config):
        goal, scene, percept = setup(config, seed=23)
        log = classical_controller(scene, goal, Tolerances(), config, percept)
        assert all(e["sigma"] is None for e in log.entries)
        assert all(e["retry_edge"] is None for e in log.entries)
        assert all(not e["tool_results"] for e in log.entries)

    def test_waypoint_interface_parity(self, config):
        # Every record carries a Waypoint that parses through the world type.
        goal, scene, percept = setup(config, seed=23)
        log = classical_controller(scene, goal, Tolerances(), config, percept)
        for e in log.entries:
            wp = Waypoint.from_jsonable(e["waypoint"])
            assert isinstance(wp, Waypoint)
        assert len(log.entries) == 6 * 8

    def test_noise_hurts_classical_more_than_gated(self, config):
        # Paired seed: same world, same perception bias for both policies.
        worse = 0
        for seed in (31, 32, 33):
            goal, scene, percept = setup(config, seed=seed, sigma=0.005)
            gated_percept = PerceptionModel.from_jsonable(percept.to_jsonable())
            classical_log = classical_controller(scene, goal, Tolerances(), config, percept)
            gated_log = run_pipeline(scene, goal, RulePolicy(), Tolerances(), config,
                                     perception=gated_percept)

            def mean_ctr(log):
                errs = []
                for s, b in log.summary["slot_assignments"].items():
                    final = Pose.from_jsonable(log.summary["final_poses"][str(b)])
                    errs.append(center_offset(final.t, goal.slots[int(s)].pose.t))
                return float(np.mean(errs))

            if not classical_log.summary["success"]:
                worse += 1
            elif mean_ctr(classical_log) > mean_ctr(gated_log):
                worse += 1
        assert worse == 3


class TestSingleAgent:
    def test_rule_variant_completes_without_retries(self, config):
        goal, scene, percept = setup(config, seed=23)
        log = single_agent_trial(scene, goal, Tolerances(), config, percept)
        assert log.summary["success"]
        assert all(e["sigma"] is None for e in log.entries)
        assert all(e["retry_edge"] is None for e in log.entries)

    def test_bias_not_corrected(self, config):
        # 8 mm bias: the ablation keeps it; the gated pipeline removes it.
        faults = FaultPlan(placement_bias_xy=(0.008, 0.0))
        goal, scene, percept = setup(config, seed=23)
        single_log = single_agent_trial(scene, goal, Tolerances(), config,
                                        PerceptionModel(), faults=faults)
        gated_log = run_pipeline(scene, goal, RulePolicy(), Tolerances(), config,
                                 faults=FaultPlan(placement_bias_xy=(0.008, 0.0)))

        def mean_exy(log):
            errs = []
            for s, b in log.summary["slot_assignments"].items():
                final = Pose.from_jsonable(log.summary["final_poses"][str(b)])
                errs.append(float(np.linalg.norm(
                    final.t[:2] - goal.slots[int(s)].pose.t[:2])))
            return float(np.mean(errs))

        assert mean_exy(single_log) == pytest.approx(0.008, abs=1e-6)
        assert mean_exy(gated_log) < 1e-6
        assert mean_exy(single_log) - mean_exy(gated_log) >= 0.003
