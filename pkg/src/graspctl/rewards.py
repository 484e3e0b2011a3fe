"""Grasp reward terms, the bounding-box object abstraction, a geometric contact
proxy, and observation-vector assembly for the arm and hand agents."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .kinematics import ChainModel, JointState, KinematicsEval, RigidTransform, Twist, evaluate
from .rotations import matrix_from_quat, quat_angle, quat_conjugate, quat_from_matrix, quat_multiply

DEFAULT_ARM_WEIGHTS = {
    "distance": 1.0,
    "alignment": 1.0,
    "grasp": 1.0,
    "lift": 10.0,
    "smoothness_1st": 2e-5,
    "smoothness_2nd": 2e-6,
    "termination": 100.0,
}
DEFAULT_HAND_WEIGHTS = {
    "grasp": 2.0,
    "smoothness_1st": 1e-5,
    "smoothness_2nd": 1e-6,
    "termination": 100.0,
}

MAX_CONTACT_REWARD = 7  # spatial form closure needs seven frictionless contacts
MIN_CONTACTS_FOR_GRASP = 2  # indicator requires strictly more than this


class RewardError(ValueError):
    pass


@dataclass(frozen=True)
class Mvbb:
    """Minimum-volume bounding box: pose plus edge lengths."""

    position: np.ndarray
    orientation: np.ndarray  # unit quaternion (w, x, y, z)
    dimensions: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        quat = np.asarray(self.orientation, dtype=float).reshape(4)
        dims = np.asarray(self.dimensions, dtype=float).reshape(3)
        norm = np.linalg.norm(quat)
        if abs(norm - 1.0) > 1e-9:
            raise RewardError("orientation quaternion must be unit norm")
        if np.any(dims <= 0.0):
            raise RewardError("box dimensions must be positive")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", quat / norm)
        object.__setattr__(self, "dimensions", dims)

    @property
    def circumradius(self) -> float:
        """Half the box diagonal: radius of the smallest enclosing sphere."""
        return float(np.linalg.norm(self.dimensions) / 2.0)

    def rotation(self) -> np.ndarray:
        return matrix_from_quat(self.orientation)


@dataclass(frozen=True)
class LiftCommand:
    """Target 6D palm pose to track after a grasp is secured."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        quat = np.asarray(self.orientation, dtype=float).reshape(4)
        norm = np.linalg.norm(quat)
        if abs(norm - 1.0) > 1e-9:
            raise RewardError("command quaternion must be unit norm")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", quat / norm)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.orientation])


@dataclass(frozen=True)
class RewardConfig:
    """Gaussian widths, deadbands, and reward weights.

    The sigma widths are engineering defaults (not stated by the reward formulas'
    source tables); finger_length and the 30-degree angular deadband are platform
    values.
    """

    finger_length: float = 0.12
    sigma_dist: float = 0.01
    sigma_align: float = (np.pi / 3.0) ** 2
    sigma_pos: float = 0.01
    sigma_ori: float = (np.pi / 4.0) ** 2
    angular_deadband: float = np.deg2rad(30.0)
    contact_tolerance: float = 0.005
    arm_weights: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_ARM_WEIGHTS))
    hand_weights: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_HAND_WEIGHTS))

    def __post_init__(self):
        for name in ("finger_length", "sigma_dist", "sigma_align", "sigma_pos",
                     "sigma_ori", "contact_tolerance"):
            if getattr(self, name) <= 0.0:
                raise RewardError(f"{name} must be positive")


def golden_zone_threshold(mvbb: Mvbb, cfg: RewardConfig) -> float:
    """Distance below which the palm is considered well placed: circumradius plus
    half the finger length."""
    return mvbb.circumradius + 0.5 * cfg.finger_length


def golden_zone_reward(p_palm: np.ndarray, mvbb: Mvbb, cfg: RewardConfig) -> float:
    """Proximity reward; saturates at 1 inside the golden zone."""
    d = float(np.linalg.norm(mvbb.position - np.asarray(p_palm, dtype=float)))
    excess = max(0.0, d - golden_zone_threshold(mvbb, cfg))
    return float(np.exp(-(excess ** 2) / cfg.sigma_dist))


def alignment_reward(
    palm_pose: RigidTransform,
    p_palm: np.ndarray,
    mvbb: Mvbb,
    r_dist: float,
    cfg: RewardConfig,
) -> float:
    """Orientation reward gated by proximity: geodesic angle between the palm
    normal (+z) and the palm-to-object direction, with a deadband."""
    rel = mvbb.position - np.asarray(p_palm, dtype=float)
    d = float(np.linalg.norm(rel))
    if d < 1e-12:
        return float(r_dist)  # direction undefined; treat as aligned
    z_palm = palm_pose.rotation[:, 2]
    cos_theta = float(np.clip(z_palm @ (rel / d), -1.0, 1.0))
    theta = float(np.arccos(cos_theta))
    excess = max(0.0, theta - cfg.angular_deadband)
    return float(r_dist) * float(np.exp(-(excess ** 2) / cfg.sigma_align))


def grasp_indicator(d_palm_object: float, threshold: float, n_contacts: int) -> int:
    """1 when the palm is inside the golden zone and more than two contacts hold."""
    proximal = d_palm_object < threshold
    contact = n_contacts > MIN_CONTACTS_FOR_GRASP
    return int(proximal and contact)


def grasp_reward(d_palm_object: float, threshold: float, n_contacts: int) -> int:
    """Contact-count reward, capped at seven, gated by the grasp indicator."""
    return grasp_indicator(d_palm_object, threshold, n_contacts) * min(
        int(n_contacts), MAX_CONTACT_REWARD
    )


def lift_reward(
    palm_pose: RigidTransform,
    cmd: LiftCommand,
    grasped: int,
    cfg: RewardConfig,
) -> float:
    """Pose-tracking reward toward the lift command, 70/30 position/orientation,
    gated by the grasp indicator."""
    if not grasped:
        return 0.0
    e_pos = float(np.linalg.norm(palm_pose.translation - cmd.position))
    q_palm = quat_from_matrix(palm_pose.rotation)
    e_ori = quat_angle(quat_multiply(cmd.orientation, quat_conjugate(q_palm)))
    return float(
        0.7 * np.exp(-(e_pos ** 2) / cfg.sigma_pos)
        + 0.3 * np.exp(-(e_ori ** 2) / cfg.sigma_ori)
    )


def smoothness_penalties(
    a_t: np.ndarray, a_prev: np.ndarray, a_prev2: np.ndarray, dt: float
) -> tuple[float, float]:
    """First- and second-order action smoothness penalties (both nonpositive)."""
    if dt <= 0.0:
        raise RewardError("dt must be positive")
    a_t = np.asarray(a_t, dtype=float)
    a_prev = np.asarray(a_prev, dtype=float)
    a_prev2 = np.asarray(a_prev2, dtype=float)
    first = -float(np.sum(((a_t - a_prev) / dt) ** 2))
    second = -float(np.sum(((a_t - 2.0 * a_prev + a_prev2) / dt) ** 2))
    return first, second


def termination_penalty(illegal_collision: bool) -> float:
    return -1.0 if illegal_collision else 0.0


def weighted_totals(cfg: "RewardConfig", terms: Mapping[str, float]) -> tuple[float, float]:
    """Weighted per-agent reward sums from unweighted terms.

    `terms` uses the rollout log keys (distance, alignment, grasp, lift,
    smoothness_*_arm/hand, termination).
    """
    aw, hw = cfg.arm_weights, cfg.hand_weights
    arm = (
        aw["distance"] * terms["distance"]
        + aw["alignment"] * terms["alignment"]
        + aw["grasp"] * terms["grasp"]
        + aw["lift"] * terms["lift"]
        + aw["smoothness_1st"] * terms["smoothness_1st_arm"]
        + aw["smoothness_2nd"] * terms["smoothness_2nd_arm"]
        + aw["termination"] * terms["termination"]
    )
    hand = (
        hw["grasp"] * terms["grasp"]
        + hw["smoothness_1st"] * terms["smoothness_1st_hand"]
        + hw["smoothness_2nd"] * terms["smoothness_2nd_hand"]
        + hw["termination"] * terms["termination"]
    )
    return float(arm), float(hand)


def box_signed_distance(point: np.ndarray, mvbb: Mvbb) -> float:
    """Signed distance from a point to the oriented box surface (negative inside)."""
    local = mvbb.rotation().T @ (np.asarray(point, dtype=float) - mvbb.position)
    excess = np.abs(local) - mvbb.dimensions / 2.0
    outside = float(np.linalg.norm(np.maximum(excess, 0.0)))
    inside = float(min(np.max(excess), 0.0))
    return outside + inside


def contact_proxy(
    model: ChainModel,
    q: np.ndarray,
    mvbb: Mvbb,
    tolerance: float,
    kin: KinematicsEval | None = None,
) -> int:
    """Number of fingertips within `tolerance` of the box surface (boundary and
    interior both count); geometric stand-in for a physics contact counter."""
    if tolerance <= 0.0:
        raise RewardError("tolerance must be positive")
    k = kin if kin is not None else evaluate(model, q)
    count = 0
    for finger in model.fingers:
        tip = k.frame_point(model.fingertip_frames[finger])
        if box_signed_distance(tip, mvbb) <= tolerance:
            count += 1
    return count


# ---------------------------------------------------------------------------
# observation assembly
# ---------------------------------------------------------------------------

def assemble_arm_observation(
    model: ChainModel,
    state: JointState,
    mvbb: Mvbb,
    cmd: LiftCommand,
    prev_arm_action: np.ndarray,
) -> np.ndarray:
    """Arm-agent actor observation: full proprioception, world-frame object state,
    lift pose command, previous arm action."""
    prev_arm_action = np.asarray(prev_arm_action, dtype=float).reshape(6)
    if state.positions.shape[0] != model.n:
        raise RewardError(f"state has {state.positions.shape[0]} joints, expected {model.n}")
    return np.concatenate([
        state.positions,
        state.velocities,
        mvbb.position,
        mvbb.orientation,
        mvbb.dimensions,
        cmd.as_vector(),
        prev_arm_action,
    ])


def assemble_hand_observation(
    model: ChainModel,
    state: JointState,
    mvbb: Mvbb,
    prev_hand_action: np.ndarray,
    palm_twist_world: Twist,
    arm_action: np.ndarray,
    kin: KinematicsEval | None = None,
) -> np.ndarray:
    """Hand-agent actor observation: hand proprioception plus palm-local object
    pose and palm twist, and the arm agent's current action."""
    prev_hand_action = np.asarray(prev_hand_action, dtype=float).reshape(3 * len(model.fingers))
    arm_action = np.asarray(arm_action, dtype=float).reshape(6)
    k = kin if kin is not None else evaluate(model, state.positions)
    palm_r, palm_p = k._frame_rp(model.palm_frame)
    rt = palm_r.T
    obj_pos_local = rt @ (mvbb.position - palm_p)
    obj_quat_local = quat_from_matrix(rt @ mvbb.rotation())
    twist_local = np.concatenate([
        rt @ palm_twist_world.angular,
        rt @ palm_twist_world.linear,
    ])
    return np.concatenate([
        state.positions[model.hand_slice],
        state.velocities[model.hand_slice],
        prev_hand_action,
        obj_pos_local,
        obj_quat_local,
        mvbb.dimensions,
        twist_local,
        arm_action,
    ])


def assemble_observations(
    model: ChainModel,
    state: JointState,
    mvbb: Mvbb,
    cmd: LiftCommand,
    prev_arm_action: np.ndarray,
    prev_hand_action: np.ndarray,
    palm_twist_world: Twist,
    arm_action: np.ndarray,
    kin: KinematicsEval | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Actor observation vectors for the arm and hand agents.

    The arm agent sees world-frame object state; the hand agent sees the object
    pose and palm twist expressed in the palm frame, plus the arm's current
    action. Component order follows the platform observation tables.
    """
    arm_obs = assemble_arm_observation(model, state, mvbb, cmd, prev_arm_action)
    hand_obs = assemble_hand_observation(
        model, state, mvbb, prev_hand_action, palm_twist_world, arm_action, kin=kin
    )
    expected = observation_dimensions(model)
    if arm_obs.shape[0] != expected[0] or hand_obs.shape[0] != expected[1]:
        raise RewardError(
            f"observation dims {(arm_obs.shape[0], hand_obs.shape[0])} != expected {expected}"
        )
    return arm_obs, hand_obs


def arm_observation_slices(model: ChainModel) -> dict[str, slice]:
    """Component layout of the arm observation vector."""
    n = model.n
    out = {}
    pos = 0
    for name, width in (
        ("joint_positions", n),
        ("joint_velocities", n),
        ("object_position", 3),
        ("object_orientation", 4),
        ("object_dimensions", 3),
        ("lift_command", 7),
        ("prev_arm_action", 6),
    ):
        out[name] = slice(pos, pos + width)
        pos += width
    return out


def hand_observation_slices(model: ChainModel) -> dict[str, slice]:
    """Component layout of the hand observation vector."""
    n_hand = model.n - model.n_arm
    n_tips = 3 * len(model.fingers)
    out = {}
    pos = 0
    for name, width in (
        ("hand_joint_positions", n_hand),
        ("hand_joint_velocities", n_hand),
        ("prev_hand_action", n_tips),
        ("object_position", 3),
        ("object_orientation", 4),
        ("object_dimensions", 3),
        ("palm_twist", 6),
        ("arm_action", 6),
    ):
        out[name] = slice(pos, pos + width)
        pos += width
    return out


def assemble_critic_observation(arm_obs: np.ndarray, prev_hand_action: np.ndarray) -> np.ndarray:
    """Shared-critic global observation: actor observation plus the other agent's
    previous action (used only for logging here; training is external)."""
    return np.concatenate([np.asarray(arm_obs, dtype=float),
                           np.asarray(prev_hand_action, dtype=float)])


def observation_dimensions(model: ChainModel) -> tuple[int, int]:
    """(arm, hand) observation lengths implied by the chain layout."""
    n = model.n
    n_hand = n - model.n_arm
    n_tips = 3 * len(model.fingers)
    arm = 2 * n + 3 + 4 + 3 + 7 + 6
    hand = 2 * n_hand + n_tips + 3 + 4 + 3 + 6 + 6
    return arm, hand


def reward_config_from_dict(data: Mapping) -> RewardConfig:
    kwargs = {}
    for key in ("finger_length", "sigma_dist", "sigma_align", "sigma_pos", "sigma_ori",
                "contact_tolerance"):
        if key in data:
            kwargs[key] = float(data[key])
    if "angular_deadband_deg" in data:
        kwargs["angular_deadband"] = float(np.deg2rad(data["angular_deadband_deg"]))
    elif "angular_deadband" in data:
        kwargs["angular_deadband"] = float(data["angular_deadband"])
    if "arm_weights" in data:
        kwargs["arm_weights"] = {**DEFAULT_ARM_WEIGHTS, **data["arm_weights"]}
    if "hand_weights" in data:
        kwargs["hand_weights"] = {**DEFAULT_HAND_WEIGHTS, **data["hand_weights"]}
    return RewardConfig(**kwargs)
