import numpy as np
import pytest

from graspctl import plant
from graspctl.kinematics import JointState
from graspctl.plant import PdGains, PlantState


class TestIntegrateDesired:
    def test_zero_velocity_keeps_position(self):
        q = np.array([0.1, -0.2])
        assert np.array_equal(plant.integrate_desired(q, np.zeros(2), 0.002), q)

    def test_scalar_arithmetic(self):
        q_des = plant.integrate_desired(np.zeros(1), np.ones(1), 0.002)
        assert abs(q_des[0] - 0.002) < 1e-15

    def test_elementwise_affine(self):
        q = np.array([1.0, -1.0, 0.5])
        qd = np.array([2.0, -3.0, 0.0])
        assert np.allclose(plant.integrate_desired(q, qd, 0.1), q + 0.1 * qd)

    def test_rejects_nonpositive_dt(self):
        with pytest.raises(ValueError):
            plant.integrate_desired(np.zeros(1), np.zeros(1), 0.0)


class TestPdTorque:
    def test_zero_error_zero_torque(self):
        gains = PdGains.uniform(3)
        tau = plant.pd_torque(np.ones(3), np.ones(3), np.ones(3), np.ones(3), gains)
        assert np.array_equal(tau, np.zeros(3))

    def test_proportional_term(self):
        gains = PdGains(np.array([10.0]), np.array([0.0]), np.array([0.0]))
        tau = plant.pd_torque(np.zeros(1), np.zeros(1), np.array([0.1]), np.zeros(1), gains)
        assert abs(tau[0] - 1.0) < 1e-12

    def test_superposition(self):
        rng = np.random.default_rng(0)
        gains = PdGains(rng.uniform(1, 10, 4), rng.uniform(0.1, 1, 4), np.zeros(4))
        q = rng.normal(size=4)
        qd = rng.normal(size=4)
        e1 = rng.normal(size=4)
        e2 = rng.normal(size=4)
        t1 = plant.pd_torque(q, qd, q + e1, qd, gains)
        t2 = plant.pd_torque(q, qd, q + e2, qd, gains)
        t12 = plant.pd_torque(q, qd, q + e1 + e2, qd, gains)
        assert np.allclose(t12, t1 + t2, atol=1e-12)

    def test_feedforward_passthrough(self):
        gains = PdGains(np.zeros(2), np.zeros(2), np.array([1.5, -0.5]))
        tau = plant.pd_torque(np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2), gains)
        assert np.array_equal(tau, [1.5, -0.5])

    def test_gain_validation(self):
        with pytest.raises(ValueError):
            PdGains(np.array([-1.0]), np.array([0.0]), np.array([0.0]))
        with pytest.raises(ValueError):
            PdGains(np.array([1.0, 2.0]), np.array([0.0]), np.array([0.0]))


class TestStep:
    def test_zero_lag_realizes_command(self, one_joint):
        state = PlantState(JointState(np.zeros(1), np.zeros(1)))
        nxt = plant.step(one_joint, state, np.array([1.5]), 0.002, lag_time_constant=0.0)
        assert nxt.joint.velocities[0] == 1.5
        assert abs(nxt.joint.positions[0] - 0.003) < 1e-15

    def test_constant_command_approaches_linear_motion(self, one_joint):
        dt = 0.002
        state = PlantState(JointState(np.zeros(1), np.zeros(1)))
        qd_des = np.array([1.0])
        lag = 0.01
        for _ in range(500):
            state = plant.step(one_joint, state, qd_des, dt, lag)
        # first-order response: position approaches t - lag_effective
        assert abs(state.joint.velocities[0] - 1.0) < 1e-12
        assert state.joint.positions[0] == pytest.approx(1.0, abs=0.02)

    def test_position_clamped_at_limit(self, one_joint):
        q_max = one_joint.position_limits[1][0]
        state = PlantState(JointState(np.array([q_max]), np.zeros(1)))
        nxt = plant.step(one_joint, state, np.array([10.0]), 0.01, lag_time_constant=0.0)
        assert nxt.joint.positions[0] == q_max

    def test_positions_integrate_velocities(self, arm5f):
        rng = np.random.default_rng(1)
        dt = 0.002
        state = PlantState(JointState(arm5f.mid_configuration(), np.zeros(arm5f.n)))
        for _ in range(100):
            prev_q = state.joint.positions.copy()
            state = plant.step(arm5f, state, rng.normal(size=arm5f.n) * 0.1, dt, 0.01)
            expected = prev_q + state.joint.velocities * dt
            q_min, q_max = arm5f.position_limits
            assert np.abs(state.joint.positions - np.clip(expected, q_min, q_max)).max() < 1e-12

    def test_time_advances(self, one_joint):
        state = PlantState(JointState(np.zeros(1), np.zeros(1)), time=1.0)
        nxt = plant.step(one_joint, state, np.zeros(1), 0.002)
        assert nxt.time == pytest.approx(1.002)

    def test_dimension_mismatch_rejected(self, arm5f):
        state = PlantState(JointState(np.zeros(arm5f.n), np.zeros(arm5f.n)))
        with pytest.raises(ValueError):
            plant.step(arm5f, state, np.zeros(3), 0.002)
