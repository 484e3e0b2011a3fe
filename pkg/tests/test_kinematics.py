import numpy as np
import pytest

from graspctl import kinematics as kin
from graspctl.kinematics import (
    ChainModel,
    FixedFrame,
    KinematicsError,
    RigidTransform,
    Twist,
    evaluate,
    fingertip_jacobian_linear,
    fingertip_jacobian_relative,
    forward_kinematics,
    palm_jacobian_world,
)
from graspctl.rotations import rotation_about_axis

from conftest import _joint
from oracles import central_difference


def random_q(model, rng):
    q_min, q_max = model.position_limits
    return rng.uniform(q_min, q_max)


class TestRigidTransform:
    def test_identity_and_inverse(self):
        t = RigidTransform(rotation_about_axis(np.array([0, 0, 1.0]), 0.7),
                           np.array([0.1, -0.2, 0.3]))
        round_trip = t.compose(t.inverse())
        assert np.abs(round_trip.rotation - np.eye(3)).max() < 1e-10
        assert np.abs(round_trip.translation).max() < 1e-10

    def test_composition_associative(self):
        rng = np.random.default_rng(0)
        ts = []
        for _ in range(3):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            ts.append(RigidTransform(rotation_about_axis(axis, rng.uniform(-3, 3)),
                                     rng.normal(size=3)))
        a, b, c = ts
        left = a.compose(b).compose(c)
        right = a.compose(b.compose(c))
        assert np.abs(left.rotation - right.rotation).max() < 1e-12
        assert np.abs(left.translation - right.translation).max() < 1e-12

    def test_rejects_non_orthonormal(self):
        with pytest.raises(KinematicsError):
            RigidTransform(np.eye(3) * 1.5, np.zeros(3))

    def test_orthonormality_survives_long_chains(self):
        rng = np.random.default_rng(1)
        t = RigidTransform.identity()
        for _ in range(1000):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            step = RigidTransform(rotation_about_axis(axis, rng.uniform(-3, 3)),
                                  rng.normal(size=3))
            t = t.compose(step)
        drift = np.linalg.norm(t.rotation.T @ t.rotation - np.eye(3))
        assert drift <= 1e-10


class TestTwist:
    def test_vector_order_is_angular_then_linear(self):
        tw = Twist(np.array([1.0, 2.0, 3.0]), np.array([4.0, 5.0, 6.0]))
        assert np.array_equal(tw.as_vector(), [1, 2, 3, 4, 5, 6])
        back = Twist.from_vector(tw.as_vector())
        assert np.array_equal(back.angular, tw.angular)
        assert np.array_equal(back.linear, tw.linear)


class TestForwardKinematics:
    def test_zero_configuration_is_product_of_origins(self, arm5f):
        pose = forward_kinematics(arm5f, np.zeros(arm5f.n), "arm_j7")
        # stacked z offsets: 0.15+0.10+0.25+0.20+0.25+0.15+0.10
        assert np.allclose(pose.translation, [0.0, 0.0, 1.20], atol=1e-12)
        assert np.allclose(pose.rotation, np.eye(3), atol=1e-12)

    def test_single_revolute_rotates_link(self):
        model = ChainModel(
            name="single", platform="custom",
            joints=(_joint("j1", "base", [0, 0, 0], [0, 0, 1], "arm"),),
            frames=(FixedFrame("palm", "j1", RigidTransform(np.eye(3), np.array([1.0, 0, 0]))),),
            palm_frame="palm", fingers=(), fingertip_frames={},
        )
        pose = forward_kinematics(model, np.array([np.pi / 2]), "palm")
        assert np.allclose(pose.translation, [0.0, 1.0, 0.0], atol=1e-12)

    def test_child_frame_composes_from_parent(self, arm5f):
        rng = np.random.default_rng(2)
        q = random_q(arm5f, rng)
        k = evaluate(arm5f, q)
        parent = k.frame_pose("arm_j7")
        child = k.frame_pose("palm")
        local = parent.inverse().compose(child)
        assert np.allclose(local.translation, [0.0, 0.0, 0.08], atol=1e-12)
        assert np.allclose(local.rotation, np.eye(3), atol=1e-12)

    def test_unknown_frame_raises(self, arm5f):
        with pytest.raises(KinematicsError):
            forward_kinematics(arm5f, np.zeros(arm5f.n), "nope")

    def test_dimension_mismatch_raises(self, arm5f):
        with pytest.raises(KinematicsError):
            forward_kinematics(arm5f, np.zeros(5), "palm")


class TestPalmJacobian:
    def test_single_joint_analytic_column(self, one_joint):
        jac = palm_jacobian_world(one_joint, np.zeros(1))
        assert np.allclose(jac[:, 0], [0, 0, 1, 0, 1.0, 0], atol=1e-12)

    def test_finger_columns_zero(self, arm5f):
        rng = np.random.default_rng(3)
        jac = palm_jacobian_world(arm5f, random_q(arm5f, rng))
        assert np.abs(jac[:, arm5f.n_arm:]).max() == 0.0

    def test_matches_finite_differences(self, arm5f):
        rng = np.random.default_rng(4)
        for _ in range(25):
            q = random_q(arm5f, rng)
            jac = palm_jacobian_world(arm5f, q)

            def palm_pos(qq):
                return forward_kinematics(arm5f, qq, "palm").translation

            fd = central_difference(palm_pos, q, eps=1e-6)
            scale = max(1.0, np.abs(fd).max())
            assert np.abs(jac[3:] - fd).max() / scale < 1e-5

    def test_angular_rows_match_finite_differences(self, arm5f):
        # d(R)/dq_j = [w_j]x R  =>  w_j recovered from (dR) R^T
        rng = np.random.default_rng(5)
        q = random_q(arm5f, rng)
        jac = palm_jacobian_world(arm5f, q)
        eps = 1e-6
        for j in range(arm5f.n_arm):
            dq = np.zeros(arm5f.n)
            dq[j] = eps
            r_plus = forward_kinematics(arm5f, q + dq, "palm").rotation
            r_minus = forward_kinematics(arm5f, q - dq, "palm").rotation
            w_skew = (r_plus - r_minus) / (2 * eps) @ forward_kinematics(arm5f, q, "palm").rotation.T
            w = np.array([w_skew[2, 1], w_skew[0, 2], w_skew[1, 0]])
            assert np.abs(jac[:3, j] - w).max() < 1e-5


class TestRelativeFingertipJacobian:
    def test_arm_columns_cancel_exactly(self, arm5f):
        rng = np.random.default_rng(6)
        worst = 0.0
        for _ in range(200):
            q = random_q(arm5f, rng)
            k = evaluate(arm5f, q)
            for finger in arm5f.fingers:
                jac = fingertip_jacobian_relative(arm5f, q, finger, kin=k)
                worst = max(worst, np.abs(jac[:, :arm5f.n_arm]).max())
        assert worst <= 1e-12

    def test_other_finger_columns_zero(self, arm5f):
        rng = np.random.default_rng(7)
        q = random_q(arm5f, rng)
        jac = fingertip_jacobian_relative(arm5f, q, "index")
        for i, joint in enumerate(arm5f.joints):
            if joint.group not in ("arm", "index"):
                assert np.abs(jac[:, i]).max() == 0.0

    def test_zero_velocity_maps_to_zero_twist(self, arm5f):
        jac = fingertip_jacobian_relative(arm5f, np.zeros(arm5f.n), "middle")
        assert np.abs(jac @ np.zeros(arm5f.n)).max() == 0.0

    def test_translational_block_matches_finite_differences(self, arm5f):
        rng = np.random.default_rng(8)
        for _ in range(5):
            q = random_q(arm5f, rng)
            for finger in ("thumb", "index", "little"):
                tip_frame = arm5f.fingertip_frames[finger]

                def tip_in_palm(qq):
                    k = evaluate(arm5f, qq)
                    palm = k.frame_pose(arm5f.palm_frame)
                    return palm.rotation.T @ (k.frame_point(tip_frame) - palm.translation)

                fd = central_difference(tip_in_palm, q, eps=1e-6)
                jac = fingertip_jacobian_linear(arm5f, q, finger)
                scale = max(1.0, np.abs(fd).max())
                assert np.abs(jac - fd).max() / scale < 1e-5

    def test_straight_finger_analytic_column(self, straight_finger):
        jac = fingertip_jacobian_linear(straight_finger, np.zeros(2), "f")
        assert jac.shape == (3, 2)
        assert np.allclose(jac[:, 1], [0.0, 0.06, 0.0], atol=1e-12)
        assert np.allclose(jac[:, 0], [0.0, 0.12, 0.0], atol=1e-12)

    def test_linear_equals_bottom_rows_of_relative(self, arm5f):
        rng = np.random.default_rng(9)
        q = random_q(arm5f, rng)
        rel = fingertip_jacobian_relative(arm5f, q, "ring")
        lin = fingertip_jacobian_linear(arm5f, q, "ring")
        assert lin.shape == (3, arm5f.n)
        assert np.array_equal(lin, rel[3:])

    def test_invariant_under_world_frame_change(self, arm5f):
        rng = np.random.default_rng(10)
        q = random_q(arm5f, rng)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        base = RigidTransform(rotation_about_axis(axis, rng.uniform(-3, 3)), rng.normal(size=3))
        moved = arm5f.with_base_pose(base)
        for finger in arm5f.fingers:
            ja = fingertip_jacobian_relative(arm5f, q, finger)
            jb = fingertip_jacobian_relative(moved, q, finger)
            assert np.abs(ja - jb).max() < 1e-12

    def test_unknown_finger_raises(self, arm5f):
        with pytest.raises(KinematicsError):
            fingertip_jacobian_relative(arm5f, np.zeros(arm5f.n), "pinky")


class TestChainLoader:
    def test_platform_counts(self, arm5f, arm2f):
        assert (arm5f.n, arm5f.n_arm) == (27, 7)
        assert (arm2f.n, arm2f.n_arm) == (15, 7)
        assert arm5f.fingers == ("thumb", "index", "middle", "ring", "little")
        assert arm2f.fingers == ("left", "right")
        for model in (arm5f, arm2f):
            for finger in model.fingers:
                assert sum(1 for j in model.joints if j.group == finger) == 4

    def test_rejects_wrong_platform_count(self, arm5f):
        joints = arm5f.joints[:-1]  # drop one little-finger joint
        with pytest.raises(KinematicsError):
            ChainModel(
                name="broken", platform="5f", joints=joints, frames=arm5f.frames,
                palm_frame="palm", fingers=arm5f.fingers,
                fingertip_frames=arm5f.fingertip_frames,
            )

    def test_rejects_finger_not_on_palm(self):
        with pytest.raises(KinematicsError, match="branch"):
            ChainModel(
                name="bad", platform="custom",
                joints=(
                    _joint("a1", "base", [0, 0, 0.1], [0, 0, 1], "arm"),
                    _joint("f_j1", "a1", [0, 0, 0.1], [0, 0, 1], "f"),  # skips the palm
                ),
                frames=(
                    FixedFrame("palm", "a1", RigidTransform(np.eye(3), np.array([0, 0, 0.2]))),
                    FixedFrame("f_tip", "f_j1", RigidTransform.identity()),
                ),
                palm_frame="palm", fingers=("f",), fingertip_frames={"f": "f_tip"},
            )

    def test_rejects_arm_joints_after_fingers(self):
        with pytest.raises(KinematicsError):
            ChainModel(
                name="bad_order", platform="custom",
                joints=(
                    _joint("f_j1", "palm", [0, 0, 0], [0, 0, 1], "f"),
                    _joint("a1", "base", [0, 0, 0], [0, 0, 1], "arm"),
                ),
                frames=(
                    FixedFrame("palm", "a1", RigidTransform.identity()),
                    FixedFrame("f_tip", "f_j1", RigidTransform.identity()),
                ),
                palm_frame="palm", fingers=("f",), fingertip_frames={"f": "f_tip"},
            )

    def test_missing_chain_file(self):
        with pytest.raises(KinematicsError):
            kin.load_chain("no_such_chain")
