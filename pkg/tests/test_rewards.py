import numpy as np
import pytest

from graspctl import rewards as rw
from graspctl.kinematics import (
    ChainModel,
    FixedFrame,
    JointState,
    RigidTransform,
    Twist,
)
from graspctl.rotations import (
    matrix_from_quat,
    quat_from_matrix,
    quat_multiply,
    random_quaternion,
    rotation_about_axis,
)

from conftest import _joint

CFG = rw.RewardConfig()


def random_mvbb(rng):
    dims = rng.uniform(0.03, 0.09, size=3)
    return rw.Mvbb(rng.normal(size=3), random_quaternion(rng), dims)


def random_pose(rng):
    return RigidTransform(matrix_from_quat(random_quaternion(rng)), rng.normal(size=3))


class TestMvbb:
    def test_circumradius_is_half_diagonal(self):
        box = rw.Mvbb(np.zeros(3), np.array([1.0, 0, 0, 0]), np.array([0.06, 0.06, 0.06]))
        assert box.circumradius == pytest.approx(0.06 * np.sqrt(3) / 2)

    def test_validation(self):
        with pytest.raises(rw.RewardError):
            rw.Mvbb(np.zeros(3), np.array([1.0, 0.1, 0, 0]), np.ones(3) * 0.05)
        with pytest.raises(rw.RewardError):
            rw.Mvbb(np.zeros(3), np.array([1.0, 0, 0, 0]), np.array([0.05, -0.01, 0.05]))


class TestGoldenZone:
    def test_saturates_inside_zone(self):
        box = rw.Mvbb(np.zeros(3), np.array([1.0, 0, 0, 0]), np.full(3, 0.06))
        threshold = rw.golden_zone_threshold(box, CFG)
        assert threshold == pytest.approx(0.06 * np.sqrt(3) / 2 + 0.06)
        p_palm = np.array([threshold * 0.9, 0.0, 0.0])
        assert rw.golden_zone_reward(p_palm, box, CFG) == 1.0

    def test_one_sigma_point(self):
        box = rw.Mvbb(np.zeros(3), np.array([1.0, 0, 0, 0]), np.full(3, 0.06))
        threshold = rw.golden_zone_threshold(box, CFG)
        p_palm = np.array([threshold + np.sqrt(CFG.sigma_dist), 0.0, 0.0])
        assert rw.golden_zone_reward(p_palm, box, CFG) == pytest.approx(np.exp(-1.0))

    def test_monotone_decay_outside(self):
        box = rw.Mvbb(np.zeros(3), np.array([1.0, 0, 0, 0]), np.full(3, 0.05))
        rewards = [rw.golden_zone_reward(np.array([d, 0, 0]), box, CFG)
                   for d in np.linspace(0.0, 0.8, 50)]
        for a, b in zip(rewards, rewards[1:]):
            assert b <= a + 1e-15


class TestAlignment:
    def _palm_facing(self, direction, position):
        # build a pose whose +z axis points along `direction`
        z = direction / np.linalg.norm(direction)
        x = np.cross(np.array([0.0, 1.0, 0.0]), z)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(np.array([1.0, 0.0, 0.0]), z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return RigidTransform(np.stack([x, y, z], axis=1), position)

    def test_facing_object_gives_full_reward(self):
        box = rw.Mvbb(np.array([0.5, 0, 0.3]), np.array([1.0, 0, 0, 0]), np.full(3, 0.05))
        p_palm = np.array([0.3, 0.0, 0.3])
        pose = self._palm_facing(box.position - p_palm, p_palm)
        r = rw.alignment_reward(pose, p_palm, box, 0.7, CFG)
        assert r == pytest.approx(0.7)

    def test_deadband_boundary(self):
        box = rw.Mvbb(np.array([1.0, 0, 0]), np.array([1.0, 0, 0, 0]), np.full(3, 0.05))
        p_palm = np.zeros(3)
        tilt = rotation_about_axis(np.array([0, 1.0, 0]), CFG.angular_deadband)
        pose = self._palm_facing(np.array([1.0, 0, 0]), p_palm)
        tilted = RigidTransform(tilt @ pose.rotation, p_palm)
        r = rw.alignment_reward(tilted, p_palm, box, 1.0, CFG)
        assert r == pytest.approx(1.0, abs=1e-9)

    def test_ninety_degrees_one_sigma(self):
        # theta - deadband = 60 deg = pi/3; sigma_align = (pi/3)^2 -> exp(-1)
        box = rw.Mvbb(np.array([1.0, 0, 0]), np.array([1.0, 0, 0, 0]), np.full(3, 0.05))
        p_palm = np.zeros(3)
        pose = self._palm_facing(np.array([0.0, 0, 1.0]), p_palm)  # normal orthogonal
        r = rw.alignment_reward(pose, p_palm, box, 1.0, CFG)
        assert r == pytest.approx(np.exp(-1.0), rel=1e-9)

    def test_coincident_palm_and_object(self):
        box = rw.Mvbb(np.zeros(3), np.array([1.0, 0, 0, 0]), np.full(3, 0.05))
        pose = self._palm_facing(np.array([1.0, 0, 0]), np.zeros(3))
        assert rw.alignment_reward(pose, np.zeros(3), box, 0.4, CFG) == 0.4

    def test_gating_never_exceeds_distance_reward(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            box = random_mvbb(rng)
            pose = random_pose(rng)
            r_dist = rw.golden_zone_reward(pose.translation, box, CFG)
            r_align = rw.alignment_reward(pose, pose.translation, box, r_dist, CFG)
            assert 0.0 <= r_align <= r_dist <= 1.0


class TestGraspIndicator:
    def test_counts_and_gate(self):
        assert rw.grasp_indicator(0.05, 0.1, 5) == 1
        assert rw.grasp_reward(0.05, 0.1, 5) == 5
        assert rw.grasp_indicator(0.05, 0.1, 2) == 0  # strictly more than two
        assert rw.grasp_reward(0.05, 0.1, 2) == 0
        assert rw.grasp_indicator(0.2, 0.1, 5) == 0  # outside the zone
        assert rw.grasp_reward(0.05, 0.1, 12) == 7  # capped

    def test_monotone_in_contacts(self):
        values = [rw.grasp_reward(0.05, 0.1, n) for n in range(12)]
        for a, b in zip(values, values[1:]):
            assert b >= a

    def test_boundary_distance_strict(self):
        assert rw.grasp_indicator(0.1, 0.1, 5) == 0  # d < threshold is strict


class TestLiftReward:
    def test_perfect_pose(self):
        pose = RigidTransform.identity()
        cmd = rw.LiftCommand(np.zeros(3), np.array([1.0, 0, 0, 0]))
        assert rw.lift_reward(pose, cmd, 1, CFG) == pytest.approx(1.0)

    def test_gated_by_grasp(self):
        pose = RigidTransform.identity()
        cmd = rw.LiftCommand(np.zeros(3), np.array([1.0, 0, 0, 0]))
        assert rw.lift_reward(pose, cmd, 0, CFG) == 0.0

    def test_position_one_sigma_blend(self):
        offset = np.sqrt(CFG.sigma_pos)
        pose = RigidTransform(np.eye(3), np.array([offset, 0, 0]))
        cmd = rw.LiftCommand(np.zeros(3), np.array([1.0, 0, 0, 0]))
        expected = 0.7 * np.exp(-1.0) + 0.3
        assert rw.lift_reward(pose, cmd, 1, CFG) == pytest.approx(expected, rel=1e-12)

    def test_orientation_error_uses_wrapped_angle(self):
        rot = rotation_about_axis(np.array([0, 0, 1.0]), np.pi / 2)
        pose = RigidTransform(rot, np.zeros(3))
        cmd = rw.LiftCommand(np.zeros(3), np.array([1.0, 0, 0, 0]))
        expected = 0.7 + 0.3 * np.exp(-(np.pi / 2) ** 2 / CFG.sigma_ori)
        assert rw.lift_reward(pose, cmd, 1, CFG) == pytest.approx(expected, rel=1e-12)


class TestSmoothness:
    def test_constant_action_no_penalty(self):
        a = np.ones(6)
        first, second = rw.smoothness_penalties(a, a, a, 0.01)
        assert first == 0.0 and second == 0.0

    def test_linear_ramp(self):
        dt = 0.01
        c = np.array([1.0, -2.0, 0.5])
        a2, a1, a0 = 2 * c * dt, 1 * c * dt, 0 * c
        first, second = rw.smoothness_penalties(a2, a1, a0, dt)
        assert first == pytest.approx(-float(c @ c), rel=1e-12)
        assert second == pytest.approx(0.0, abs=1e-18)

    def test_default_weights_match_published_table(self):
        cfg = rw.RewardConfig()
        assert cfg.arm_weights["smoothness_1st"] == 2e-5
        assert cfg.arm_weights["smoothness_2nd"] == 2e-6
        assert cfg.arm_weights["lift"] == 10.0
        assert cfg.arm_weights["termination"] == 100.0
        assert cfg.hand_weights["smoothness_1st"] == 1e-5
        assert cfg.hand_weights["smoothness_2nd"] == 1e-6
        assert cfg.hand_weights["grasp"] == 2.0

    def test_weighted_totals(self):
        cfg = rw.RewardConfig()
        terms = {
            "distance": 0.5, "alignment": 0.25, "grasp": 4.0, "lift": 0.8,
            "smoothness_1st_arm": -100.0, "smoothness_2nd_arm": -10.0,
            "smoothness_1st_hand": -50.0, "smoothness_2nd_hand": -5.0,
            "termination": -1.0,
        }
        arm, hand = rw.weighted_totals(cfg, terms)
        expected_arm = (0.5 + 0.25 + 4.0 + 10.0 * 0.8 + 2e-5 * -100.0
                        + 2e-6 * -10.0 + 100.0 * -1.0)
        expected_hand = 2.0 * 4.0 + 1e-5 * -50.0 + 1e-6 * -5.0 + 100.0 * -1.0
        assert arm == pytest.approx(expected_arm, rel=1e-12)
        assert hand == pytest.approx(expected_hand, rel=1e-12)


@pytest.fixture(scope="module")
def tripod():
    """Three fingertips resting exactly on the faces of a 6 cm cube at the origin,
    one fingertip far away."""
    frames = [FixedFrame("palm", "base", RigidTransform(np.eye(3), np.array([0, 0, 0.3])))]
    tips = {}
    positions = {
        "f1": np.array([0.03, 0.0, 0.0]),
        "f2": np.array([-0.03, 0.0, 0.0]),
        "f3": np.array([0.0, 0.03, 0.0]),
        "f4": np.array([0.5, 0.5, 0.5]),
    }
    joints = []
    for name, pos in positions.items():
        joints.append(_joint(f"{name}_j", "palm", [0, 0, 0], [0, 0, 1], name))
        frames.append(FixedFrame(
            f"{name}_tip", f"{name}_j",
            RigidTransform(np.eye(3), pos - np.array([0, 0, 0.3]))))
        tips[name] = f"{name}_tip"
    return ChainModel(
        name="tripod", platform="custom", joints=tuple(joints), frames=tuple(frames),
        palm_frame="palm", fingers=tuple(positions), fingertip_frames=tips,
    )


class TestContactProxy:
    def test_box_signed_distance(self):
        box = rw.Mvbb(np.zeros(3), np.array([1.0, 0, 0, 0]), np.full(3, 0.06))
        assert rw.box_signed_distance(np.array([0.03, 0.0, 0.0]), box) == pytest.approx(0.0)
        assert rw.box_signed_distance(np.array([0.05, 0.0, 0.0]), box) == pytest.approx(0.02)
        assert rw.box_signed_distance(np.zeros(3), box) == pytest.approx(-0.03)
        assert rw.box_signed_distance(np.array([0.05, 0.05, 0.0]), box) == pytest.approx(
            np.sqrt(2) * 0.02)

    def test_constructed_three_contact_configuration(self, tripod):
        box = rw.Mvbb(np.zeros(3), np.array([1.0, 0, 0, 0]), np.full(3, 0.06))
        assert rw.contact_proxy(tripod, np.zeros(4), box, tolerance=0.005) == 3

    def test_far_fingertips_do_not_count(self, tripod):
        box = rw.Mvbb(np.array([5.0, 0, 0]), np.array([1.0, 0, 0, 0]), np.full(3, 0.06))
        assert rw.contact_proxy(tripod, np.zeros(4), box, tolerance=0.005) == 0

    def test_boundary_inclusive(self, tripod):
        box = rw.Mvbb(np.array([0.035, 0.0, 0.0]), np.array([1.0, 0, 0, 0]),
                      np.full(3, 0.06))
        # f1 tip at 0.03 sits 0.005 outside the face at 0.005: sd = 0.005 == tol
        assert rw.contact_proxy(tripod, np.zeros(4), box, tolerance=0.005) >= 1

    def test_tolerance_validation(self, tripod):
        box = rw.Mvbb(np.zeros(3), np.array([1.0, 0, 0, 0]), np.full(3, 0.06))
        with pytest.raises(rw.RewardError):
            rw.contact_proxy(tripod, np.zeros(4), box, tolerance=0.0)


class TestObservations:
    def _inputs(self, model, rng):
        state = JointState(rng.uniform(*model.position_limits),
                           rng.normal(size=model.n) * 0.1)
        box = random_mvbb(rng)
        cmd = rw.LiftCommand(rng.normal(size=3), random_quaternion(rng))
        prev_arm = rng.normal(size=6)
        prev_hand = rng.normal(size=3 * len(model.fingers))
        twist = Twist(rng.normal(size=3), rng.normal(size=3))
        arm_action = rng.normal(size=6)
        return state, box, cmd, prev_arm, prev_hand, twist, arm_action

    def test_dimensions_match_platform_tables(self, arm5f, arm2f):
        rng = np.random.default_rng(1)
        for model, expected in ((arm5f, (77, 77)), (arm2f, (53, 44))):
            args = self._inputs(model, rng)
            arm_obs, hand_obs = rw.assemble_observations(model, *args)
            assert (arm_obs.shape[0], hand_obs.shape[0]) == expected
            assert rw.observation_dimensions(model) == expected

    def test_component_layout(self, arm5f):
        rng = np.random.default_rng(2)
        state, box, cmd, prev_arm, prev_hand, twist, arm_action = self._inputs(arm5f, rng)
        arm_obs, hand_obs = rw.assemble_observations(
            arm5f, state, box, cmd, prev_arm, prev_hand, twist, arm_action)
        s = rw.arm_observation_slices(arm5f)
        assert np.array_equal(arm_obs[s["joint_positions"]], state.positions)
        assert np.array_equal(arm_obs[s["object_dimensions"]], box.dimensions)
        assert np.array_equal(arm_obs[s["prev_arm_action"]], prev_arm)
        hs = rw.hand_observation_slices(arm5f)
        assert np.array_equal(hand_obs[hs["hand_joint_positions"]],
                              state.positions[arm5f.hand_slice])
        assert np.array_equal(hand_obs[hs["arm_action"]], arm_action)

    def test_hand_object_pose_is_palm_local(self, arm5f):
        # moving the whole world by a rigid transform must not change the
        # palm-local object pose block
        rng = np.random.default_rng(3)
        state, box, cmd, prev_arm, prev_hand, twist, arm_action = self._inputs(arm5f, rng)
        world = random_pose(rng)
        moved_model = arm5f.with_base_pose(world)
        moved_box = rw.Mvbb(
            world.apply(box.position),
            quat_from_matrix(world.rotation @ box.rotation()),
            box.dimensions,
        )
        moved_twist = Twist(world.rotation @ twist.angular, world.rotation @ twist.linear)
        _, hand_a = rw.assemble_observations(
            arm5f, state, box, cmd, prev_arm, prev_hand, twist, arm_action)
        _, hand_b = rw.assemble_observations(
            moved_model, state, moved_box, cmd, prev_arm, prev_hand, moved_twist, arm_action)
        hs = rw.hand_observation_slices(arm5f)
        for block in ("object_position", "object_orientation", "palm_twist"):
            assert np.abs(hand_a[hs[block]] - hand_b[hs[block]]).max() < 1e-9

    def test_critic_observation_appends_other_agents_action(self, arm5f):
        rng = np.random.default_rng(4)
        args = self._inputs(arm5f, rng)
        arm_obs, _ = rw.assemble_observations(arm5f, *args)
        critic = rw.assemble_critic_observation(arm_obs, args[4])
        assert critic.shape[0] == arm_obs.shape[0] + 15


class TestRigidTransformInvariance:
    def test_all_rewards_invariant(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            box = random_mvbb(rng)
            pose = random_pose(rng)
            cmd = rw.LiftCommand(rng.normal(size=3), random_quaternion(rng))
            world = random_pose(rng)

            moved_pose = RigidTransform(world.rotation @ pose.rotation,
                                        world.apply(pose.translation))
            moved_box = rw.Mvbb(world.apply(box.position),
                                quat_from_matrix(world.rotation @ box.rotation()),
                                box.dimensions)
            moved_cmd = rw.LiftCommand(world.apply(cmd.position),
                                       quat_multiply(quat_from_matrix(world.rotation),
                                                     cmd.orientation))

            r_d = rw.golden_zone_reward(pose.translation, box, CFG)
            r_d2 = rw.golden_zone_reward(moved_pose.translation, moved_box, CFG)
            assert abs(r_d - r_d2) < 1e-9

            r_a = rw.alignment_reward(pose, pose.translation, box, r_d, CFG)
            r_a2 = rw.alignment_reward(moved_pose, moved_pose.translation, moved_box,
                                       r_d2, CFG)
            assert abs(r_a - r_a2) < 1e-9

            r_l = rw.lift_reward(pose, cmd, 1, CFG)
            r_l2 = rw.lift_reward(moved_pose, moved_cmd, 1, CFG)
            assert abs(r_l - r_l2) < 1e-9
