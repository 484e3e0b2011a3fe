"""Kinematic plant: integrates desired joint velocities with a first-order velocity
lag and position-limit clamping. The PD torque law is computed for logging and
unit tests; it does not drive this velocity-level plant (no contact dynamics)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kinematics import ChainModel, JointState


@dataclass(frozen=True)
class PdGains:
    """Joint-space stiffness/damping (diagonal) plus a constant feedforward torque."""

    kp: np.ndarray
    kd: np.ndarray
    tau_ff: np.ndarray

    def __post_init__(self):
        kp = np.asarray(self.kp, dtype=float).reshape(-1)
        kd = np.asarray(self.kd, dtype=float).reshape(-1)
        tau = np.asarray(self.tau_ff, dtype=float).reshape(-1)
        if kp.shape != kd.shape or kp.shape != tau.shape:
            raise ValueError("kp, kd, tau_ff must have identical lengths")
        if np.any(kp < 0.0) or np.any(kd < 0.0):
            raise ValueError("gains must be nonnegative")
        object.__setattr__(self, "kp", kp)
        object.__setattr__(self, "kd", kd)
        object.__setattr__(self, "tau_ff", tau)

    @staticmethod
    def uniform(n: int, kp: float = 50.0, kd: float = 2.0) -> "PdGains":
        return PdGains(np.full(n, kp), np.full(n, kd), np.zeros(n))


@dataclass
class PlantState:
    joint: JointState
    time: float = 0.0

    def copy(self) -> "PlantState":
        return PlantState(self.joint.copy(), self.time)


def integrate_desired(q: np.ndarray, qd_des: np.ndarray, dt: float) -> np.ndarray:
    """Desired positions from one explicit-Euler step of the velocity command."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    return np.asarray(q, dtype=float) + np.asarray(qd_des, dtype=float) * dt


def pd_torque(
    q: np.ndarray,
    qd: np.ndarray,
    q_des: np.ndarray,
    qd_des: np.ndarray,
    gains: PdGains,
) -> np.ndarray:
    """tau = Kp (q_des - q) + Kd (qd_des - qd) + tau_ff."""
    return (
        gains.kp * (np.asarray(q_des) - np.asarray(q))
        + gains.kd * (np.asarray(qd_des) - np.asarray(qd))
        + gains.tau_ff
    )


def step(
    model: ChainModel,
    state: PlantState,
    qd_des: np.ndarray,
    dt: float,
    lag_time_constant: float = 0.01,
) -> PlantState:
    """Advance one control period: first-order velocity lag toward qd_des, explicit
    position integration, then clamping to the joint position limits."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    qd_des = np.asarray(qd_des, dtype=float).reshape(-1)
    if qd_des.shape[0] != model.n:
        raise ValueError(f"expected {model.n} joint velocities")
    blend = 1.0 if lag_time_constant <= 0.0 else min(1.0, dt / lag_time_constant)
    qd = state.joint.velocities + (qd_des - state.joint.velocities) * blend
    q = state.joint.positions + qd * dt
    q_min, q_max = model.position_limits
    q = np.clip(q, q_min, q_max)
    return PlantState(JointState(q, qd), state.time + dt)
