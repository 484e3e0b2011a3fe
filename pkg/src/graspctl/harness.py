"""Scenario configuration, policy interfaces, the 100 Hz / 500 Hz rollout loop,
success metrics, and parallel batch evaluation.

The high-level policy emits one command per command period; the IK controller and
kinematic plant advance at the controller rate (five substeps per command by
default). Constraint slacks are audited at every controller substep.
"""

from __future__ import annotations

import json
import os
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import plant as plant_mod
from . import rewards as rw
from . import steer as steer_mod
from .ikcontrol import (
    CONSTRAINT_FAMILIES,
    CollisionModel,
    ControlCommand,
    IkConfig,
    collision_distances,
    collision_model_from_dict,
    control_step,
    ik_config_from_dict,
)
from .kinematics import ChainModel, JointState, Twist, evaluate, load_chain
from .plant import PdGains, PlantState
from .rotations import (
    quat_angle,
    quat_axis_angle,
    quat_conjugate,
    quat_from_matrix,
    quat_multiply,
    rotation_about_axis,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

WORKERS_ENV_VAR = "GRASPCTL_WORKERS"


class ScenarioError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scenario description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObjectSpawnConfig:
    """Bounding-box object sampler: aspect ratios are drawn, then the box is
    uniformly scaled so its shortest edge lands strictly inside the grip range;
    mass follows the cube of the applied scale."""

    min_edge: float = 0.03
    max_edge: float = 0.09
    aspect_max: float = 2.5
    base_mass: float = 0.5
    reference_edge: float = 0.06
    mass_jitter: tuple[float, float] = (0.8, 1.2)
    scale_jitter: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        if not 0.0 < self.min_edge < self.max_edge:
            raise ScenarioError("object edge bounds must satisfy 0 < min < max")
        if self.aspect_max < 1.0:
            raise ScenarioError("aspect_max must be >= 1")


@dataclass(frozen=True)
class LiftSpawnConfig:
    pos_low: tuple[float, float, float] = (0.35, -0.15, 0.30)
    pos_high: tuple[float, float, float] = (0.55, 0.15, 0.45)
    orientation: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 0.0)  # palm down
    yaw_range: tuple[float, float] = (0.0, 0.0)


@dataclass
class Scenario:
    """Everything one rollout needs: chain, collision model, controller config,
    reward config, samplers, rates, and optional APF / reach-goal sections."""

    name: str
    model: ChainModel
    collision: CollisionModel
    ik: IkConfig
    reward: rw.RewardConfig
    gains: PdGains
    home_q: np.ndarray
    episode_length: float = 1.0
    command_rate: float = 100.0
    controller_rate: float = 500.0
    lag_time_constant: float = 0.0
    workspace_center: tuple[float, float] = (0.45, 0.0)
    workspace_rect: tuple[float, float] = (0.6, 0.9)
    object_spawn: ObjectSpawnConfig = field(default_factory=ObjectSpawnConfig)
    lift_spawn: LiftSpawnConfig = field(default_factory=LiftSpawnConfig)
    apf: steer_mod.ApfConfig | None = None
    reach_goal: tuple[np.ndarray, float] | None = None  # (position, tolerance)
    termination_pairs: tuple[str, ...] = ()
    success_pos_tol: float = 0.02
    success_contacts: int = 3
    success_hold: float = 0.5
    policy_params: Mapping = field(default_factory=dict)

    @property
    def substeps(self) -> int:
        return int(round(self.controller_rate / self.command_rate))

    @property
    def command_period(self) -> float:
        return 1.0 / self.command_rate

    @property
    def controller_dt(self) -> float:
        return 1.0 / self.controller_rate

    def validate(self) -> None:
        ratio = self.controller_rate / self.command_rate
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ScenarioError("controller_rate must be an integer multiple of command_rate")
        if self.episode_length <= 0.0:
            raise ScenarioError("episode_length must be positive")
        self.model.check_q(self.home_q)
        q_min, q_max = self.model.position_limits
        if np.any(self.home_q < q_min) or np.any(self.home_q > q_max):
            raise ScenarioError("home configuration violates position limits")
        for sphere in self.collision.spheres:
            if not self.model.has_frame(sphere.frame):
                raise ScenarioError(f"collision sphere '{sphere.name}' references unknown frame "
                                    f"'{sphere.frame}'")
        pair_names = {s.name for s in self.collision.spheres} | {
            h.name for h in self.collision.half_spaces}
        for name in self.termination_pairs:
            pair = tuple(name.split("|"))
            if len(pair) != 2 or pair[0] not in pair_names or pair[1] not in pair_names:
                raise ScenarioError(f"termination pair '{name}' not in collision model")
        if not (0.03 - 1e-12 <= self.object_spawn.min_edge
                and self.object_spawn.max_edge <= 0.09 + 1e-12):
            raise ScenarioError("object shortest-edge range must stay within [0.03, 0.09] m")
        if self.gains.kp.shape[0] != self.model.n:
            raise ScenarioError("PD gain length must match joint count")


def builtin_scenario_path(name: str) -> Path:
    return Path(__file__).parent / "data" / "scenarios" / f"{name}.toml"


def load_scenario(source: str | Path) -> Scenario:
    path = Path(source)
    if not path.suffix:
        candidate = builtin_scenario_path(str(source))
        if candidate.exists():
            path = candidate
    if not path.exists():
        raise ScenarioError(f"scenario file not found: {source}")
    with open(path, "rb") as fh:
        data = tomllib.load(fh)

    chain_ref = data.get("chain", "arm5f")
    chain_path = Path(chain_ref)
    if not chain_path.suffix:
        model = load_chain(chain_ref)
    else:
        if not chain_path.is_absolute():
            chain_path = path.parent / chain_path
        model = load_chain(chain_path)

    platform = data.get("platform")
    if platform and platform != model.platform:
        raise ScenarioError(
            f"scenario declares platform '{platform}' but chain is '{model.platform}'"
        )

    collision = collision_model_from_dict(data.get("collision", {}))
    ik_cfg = ik_config_from_dict(data.get("ik", {}))
    reward_cfg = rw.reward_config_from_dict(data.get("rewards", {}))

    gains_data = data.get("gains", {})

    def _gain_vec(key: str, default: float) -> np.ndarray:
        raw = np.asarray(gains_data.get(key, [default]), dtype=float).reshape(-1)
        return np.full(model.n, raw[0]) if raw.shape[0] == 1 else raw

    gains = PdGains(_gain_vec("kp", 50.0), _gain_vec("kd", 2.0), _gain_vec("tau_ff", 0.0))

    home_q = np.asarray(data.get("home_q", np.zeros(model.n)), dtype=float)

    obj_data = data.get("object", {})
    object_spawn = ObjectSpawnConfig(
        min_edge=float(obj_data.get("min_edge", 0.03)),
        max_edge=float(obj_data.get("max_edge", 0.09)),
        aspect_max=float(obj_data.get("aspect_max", 2.5)),
        base_mass=float(obj_data.get("base_mass", 0.5)),
        reference_edge=float(obj_data.get("reference_edge", 0.06)),
        mass_jitter=tuple(obj_data.get("mass_jitter", (0.8, 1.2))),
        scale_jitter=tuple(obj_data.get("scale_jitter", (0.8, 1.2))),
    )
    lift_data = data.get("lift", {})
    lift_spawn = LiftSpawnConfig(
        pos_low=tuple(lift_data.get("pos_low", (0.35, -0.15, 0.30))),
        pos_high=tuple(lift_data.get("pos_high", (0.55, 0.15, 0.45))),
        orientation=tuple(lift_data.get("orientation", (0.0, 0.0, 1.0, 0.0))),
        yaw_range=tuple(lift_data.get("yaw_range", (0.0, 0.0))),
    )

    apf = steer_mod.apf_config_from_dict(data["apf"]) if "apf" in data else None

    reach_goal = None
    if "reach" in data:
        reach_goal = (
            np.asarray(data["reach"]["goal_position"], dtype=float),
            float(data["reach"].get("tolerance", 0.02)),
        )

    workspace = data.get("workspace", {})
    scenario = Scenario(
        name=data.get("name", path.stem),
        model=model,
        collision=collision,
        ik=ik_cfg,
        reward=reward_cfg,
        gains=gains,
        home_q=home_q,
        episode_length=float(data.get("episode_length", 1.0)),
        command_rate=float(data.get("command_rate", 100.0)),
        controller_rate=float(data.get("controller_rate", 500.0)),
        lag_time_constant=float(data.get("lag_time_constant", 0.0)),
        workspace_center=tuple(workspace.get("center", (0.45, 0.0))),
        workspace_rect=tuple(workspace.get("rect", (0.6, 0.9))),
        object_spawn=object_spawn,
        lift_spawn=lift_spawn,
        apf=apf,
        reach_goal=reach_goal,
        termination_pairs=tuple(data.get("termination_pairs", ())),
        success_pos_tol=float(data.get("success_pos_tol", 0.02)),
        success_contacts=int(data.get("success_contacts", 3)),
        success_hold=float(data.get("success_hold", 0.5)),
        policy_params=data.get("policy", {}),
    )
    scenario.validate()
    return scenario


def sample_object(scenario: Scenario, rng: np.random.Generator) -> tuple[rw.Mvbb, float]:
    """Draw one bounding-box object: aspect ratios, uniform scale to the target
    shortest edge (strictly inside the grip range), table-top pose, cube-law mass."""
    cfg = scenario.object_spawn
    aspect = rng.uniform(1.0, cfg.aspect_max, size=3)
    aspect /= aspect.min()
    lo, hi = cfg.min_edge, cfg.max_edge
    span = hi - lo
    target = rng.uniform(lo + 0.01 * span, hi - 0.01 * span)
    jitter = rng.uniform(*cfg.scale_jitter)
    target = float(np.clip(target * jitter, lo + 0.005 * span, hi - 0.005 * span))
    dims = aspect * target
    scale = target / cfg.reference_edge
    mass = cfg.base_mass * scale ** 3 * rng.uniform(*cfg.mass_jitter)

    cx, cy = scenario.workspace_center
    wx, wy = scenario.workspace_rect
    pos = np.array([
        cx + rng.uniform(-wx / 2, wx / 2),
        cy + rng.uniform(-wy / 2, wy / 2),
        dims[2] / 2.0,
    ])
    yaw = rng.uniform(-np.pi, np.pi)
    quat = quat_from_matrix(rotation_about_axis(np.array([0.0, 0.0, 1.0]), yaw))
    return rw.Mvbb(pos, quat, dims), float(mass)


def sample_lift(scenario: Scenario, rng: np.random.Generator) -> rw.LiftCommand:
    cfg = scenario.lift_spawn
    pos = rng.uniform(np.asarray(cfg.pos_low), np.asarray(cfg.pos_high))
    quat = np.asarray(cfg.orientation, dtype=float)
    quat = quat / np.linalg.norm(quat)
    lo, hi = cfg.yaw_range
    if hi > lo:
        yaw = rng.uniform(lo, hi)
        spin = quat_from_matrix(rotation_about_axis(np.array([0.0, 0.0, 1.0]), yaw))
        quat = quat_multiply(spin, quat)
    return rw.LiftCommand(pos, quat)


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------

class Policy:
    """High-level agent pair: maps observations to one ControlCommand per command
    period. arm_action runs first; the hand observation then carries the arm's
    current action, mirroring the agents' causal order."""

    def __init__(self, model: ChainModel):
        self.model = model

    def reset(self, seed: int | None = None) -> None:
        pass

    def arm_action(self, arm_obs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hand_action(self, hand_obs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, arm_obs: np.ndarray, hand_obs: np.ndarray) -> ControlCommand:
        arm = self.arm_action(arm_obs)
        hand = self.hand_action(hand_obs)
        return ControlCommand.from_vector(
            np.concatenate([arm, hand]), self.model.fingers
        )


class ZeroPolicy(Policy):
    def arm_action(self, arm_obs):
        return np.zeros(6)

    def hand_action(self, hand_obs):
        return np.zeros(3 * len(self.model.fingers))


class RandomPolicy(Policy):
    """Bounded uniform commands; deterministic given the reset seed."""

    def __init__(self, model: ChainModel, max_angular: float = 0.5, max_linear: float = 0.3,
                 max_fingertip: float = 0.2):
        super().__init__(model)
        self.max_angular = max_angular
        self.max_linear = max_linear
        self.max_fingertip = max_fingertip
        self._rng = np.random.default_rng(0)

    def reset(self, seed: int | None = None) -> None:
        self._rng = np.random.default_rng(seed)

    def arm_action(self, arm_obs):
        return np.concatenate([
            self._rng.uniform(-self.max_angular, self.max_angular, 3),
            self._rng.uniform(-self.max_linear, self.max_linear, 3),
        ])

    def hand_action(self, hand_obs):
        return self._rng.uniform(
            -self.max_fingertip, self.max_fingertip, 3 * len(self.model.fingers)
        )


def _pose_servo(p_now, r_now, p_target, q_target, kp_lin, kp_ang, max_lin, max_ang):
    v = kp_lin * (p_target - p_now)
    speed = np.linalg.norm(v)
    if speed > max_lin:
        v *= max_lin / speed
    q_now = quat_from_matrix(r_now)
    w = kp_ang * quat_axis_angle(quat_multiply(q_target, quat_conjugate(q_now)))
    rate = np.linalg.norm(w)
    if rate > max_ang:
        w *= max_ang / rate
    return np.concatenate([w, v])


class WaypointPolicy(Policy):
    """Task-space P servo through a fixed list of palm pose waypoints; fingers idle."""

    def __init__(self, model: ChainModel, waypoints: Sequence[tuple[np.ndarray, np.ndarray]],
                 kp_lin: float = 2.0, kp_ang: float = 2.0, max_linear: float = 0.4,
                 max_angular: float = 1.0, tolerance: float = 0.02):
        super().__init__(model)
        self.waypoints = [
            (np.asarray(p, dtype=float), np.asarray(q, dtype=float) / np.linalg.norm(q))
            for p, q in waypoints
        ]
        if not self.waypoints:
            raise ScenarioError("waypoint policy needs at least one waypoint")
        self.kp_lin, self.kp_ang = kp_lin, kp_ang
        self.max_linear, self.max_angular = max_linear, max_angular
        self.tolerance = tolerance
        self._idx = 0
        self._slices = rw.arm_observation_slices(model)

    def reset(self, seed: int | None = None) -> None:
        self._idx = 0

    def arm_action(self, arm_obs):
        q = arm_obs[self._slices["joint_positions"]]
        palm = evaluate(self.model, q).frame_pose(self.model.palm_frame)
        p_t, q_t = self.waypoints[self._idx]
        if (np.linalg.norm(palm.translation - p_t) < self.tolerance
                and self._idx + 1 < len(self.waypoints)):
            self._idx += 1
            p_t, q_t = self.waypoints[self._idx]
        return _pose_servo(palm.translation, palm.rotation, p_t, q_t,
                           self.kp_lin, self.kp_ang, self.max_linear, self.max_angular)

    def hand_action(self, hand_obs):
        return np.zeros(3 * len(self.model.fingers))


class GraspPolicy(Policy):
    """Scripted reach-close-lift behavior: servo the palm to a pre-grasp pose over
    the object, close the fingertips toward the object center, then track the lift
    command while holding the grasp."""

    def __init__(self, model: ChainModel, approach_offset=(0.0, -0.05, 0.12),
                 pregrasp_quat=(0.0, 0.0, 1.0, 0.0), kp_lin: float = 2.5,
                 kp_ang: float = 2.5, max_linear: float = 0.4, max_angular: float = 1.2,
                 approach_tol: float = 0.02, close_time: float = 0.6,
                 tip_speed: float = 0.25, hold_tip_speed: float = 0.08,
                 command_period: float = 0.01):
        super().__init__(model)
        self.approach_offset = np.asarray(approach_offset, dtype=float)
        quat = np.asarray(pregrasp_quat, dtype=float)
        self.pregrasp_quat = quat / np.linalg.norm(quat)
        self.kp_lin, self.kp_ang = kp_lin, kp_ang
        self.max_linear, self.max_angular = max_linear, max_angular
        self.approach_tol = approach_tol
        self.close_steps = max(1, int(round(close_time / command_period)))
        self.tip_speed = tip_speed
        self.hold_tip_speed = hold_tip_speed
        self._arm_slices = rw.arm_observation_slices(model)
        self._hand_slices = rw.hand_observation_slices(model)
        self.reset()

    def reset(self, seed: int | None = None) -> None:
        self.stage = "approach"
        self._close_count = 0
        self._q = np.zeros(self.model.n)
        self._kin = None

    def arm_action(self, arm_obs):
        s = self._arm_slices
        q = arm_obs[s["joint_positions"]]
        self._q = q
        self._kin = evaluate(self.model, q)
        obj_pos = arm_obs[s["object_position"]]
        lift = arm_obs[s["lift_command"]]
        palm = self._kin.frame_pose(self.model.palm_frame)

        if self.stage == "approach":
            target_p = obj_pos + self.approach_offset
            target_q = self.pregrasp_quat
            if np.linalg.norm(palm.translation - target_p) < self.approach_tol:
                self.stage = "close"
        if self.stage == "close":
            target_p = obj_pos + self.approach_offset
            target_q = self.pregrasp_quat
            self._close_count += 1
            if self._close_count >= self.close_steps:
                self.stage = "lift"
        if self.stage == "lift":
            target_p, target_q = lift[:3], lift[3:]
        return _pose_servo(palm.translation, palm.rotation, target_p, target_q,
                           self.kp_lin, self.kp_ang, self.max_linear, self.max_angular)

    def hand_action(self, hand_obs):
        if self.stage == "approach":
            return np.zeros(3 * len(self.model.fingers))
        speed = self.tip_speed if self.stage == "close" else self.hold_tip_speed
        s = self._hand_slices
        obj_local = hand_obs[s["object_position"]]
        kin = self._kin if self._kin is not None else evaluate(self.model, self._q)
        palm = kin.frame_pose(self.model.palm_frame)
        out = []
        for finger in self.model.fingers:
            tip_world = kin.frame_point(self.model.fingertip_frames[finger])
            tip_local = palm.rotation.T @ (tip_world - palm.translation)
            direction = obj_local - tip_local
            dist = np.linalg.norm(direction)
            if dist > 1e-9:
                out.append(direction / dist * min(speed, 3.0 * dist))
            else:
                out.append(np.zeros(3))
        return np.concatenate(out)


MLP_DEFAULT_HIDDEN = (256, 256, 256)


def default_mlp_weights(model: ChainModel, rng: np.random.Generator,
                        hidden: Sequence[int] = MLP_DEFAULT_HIDDEN) -> dict[str, np.ndarray]:
    """Randomly initialized weight arrays for the default policy-network shape
    (three hidden layers of 256); save with np.savez and load via MlpPolicy."""
    arm_dim, hand_dim = rw.observation_dimensions(model)
    out = {}
    for prefix, n_in, n_out in (("arm", arm_dim, 6),
                                ("hand", hand_dim, 3 * len(model.fingers))):
        sizes = [n_in, *hidden, n_out]
        for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
            out[f"{prefix}_w{i}"] = rng.normal(size=(b, a)) * np.sqrt(1.0 / a)
            out[f"{prefix}_b{i}"] = np.zeros(b)
    return out


class MlpPolicy(Policy):
    """Dense tanh MLP pair loaded from an .npz weight file.

    Expected arrays: arm_w0/arm_b0, ..., hand_w0/hand_b0, ... with output sizes 6
    and 3*|fingers|; hidden activations are tanh, outputs linear. The default
    architecture produced by default_mlp_weights is three hidden layers of 256.
    """

    def __init__(self, model: ChainModel, weights_path: str | Path):
        super().__init__(model)
        data = np.load(weights_path)
        self.arm_layers = self._collect(data, "arm")
        self.hand_layers = self._collect(data, "hand")
        if self.arm_layers[-1][0].shape[0] != 6:
            raise ScenarioError("arm MLP must output 6 values")
        if self.hand_layers[-1][0].shape[0] != 3 * len(model.fingers):
            raise ScenarioError(f"hand MLP must output {3 * len(model.fingers)} values")

    @staticmethod
    def _collect(data, prefix: str):
        layers = []
        i = 0
        while f"{prefix}_w{i}" in data:
            layers.append((np.asarray(data[f"{prefix}_w{i}"], dtype=float),
                           np.asarray(data[f"{prefix}_b{i}"], dtype=float)))
            i += 1
        if not layers:
            raise ScenarioError(f"no '{prefix}_w*' arrays in weight file")
        return layers

    @staticmethod
    def _forward(layers, x):
        for w, b in layers[:-1]:
            x = np.tanh(w @ x + b)
        w, b = layers[-1]
        return w @ x + b

    def arm_action(self, arm_obs):
        return self._forward(self.arm_layers, np.asarray(arm_obs, dtype=float))

    def hand_action(self, hand_obs):
        return self._forward(self.hand_layers, np.asarray(hand_obs, dtype=float))


def make_policy(kind: str, scenario: Scenario) -> Policy:
    """Policy factory for the CLI: zero | random | waypoint | grasp | mlp:<path>."""
    model = scenario.model
    params = dict(scenario.policy_params.get(kind, {})) if scenario.policy_params else {}
    if kind == "zero":
        return ZeroPolicy(model)
    if kind == "random":
        return RandomPolicy(model, **params)
    if kind == "waypoint":
        waypoints = params.pop("waypoints", None)
        if waypoints is None:
            raise ScenarioError("scenario lacks [policy.waypoint] waypoints")
        pairs = [(np.asarray(w["position"], dtype=float), np.asarray(w["orientation"], dtype=float))
                 for w in waypoints]
        return WaypointPolicy(model, pairs, **params)
    if kind == "grasp":
        params.setdefault("command_period", scenario.command_period)
        return GraspPolicy(model, **params)
    if kind.startswith("mlp:"):
        return MlpPolicy(model, kind.split(":", 1)[1])
    raise ScenarioError(f"unknown policy '{kind}'")


# ---------------------------------------------------------------------------
# rollout records
# ---------------------------------------------------------------------------

@dataclass
class SubstepLog:
    time: float
    command_norm: float
    tracking_error: float
    status: str
    newton_iterations: int
    kkt_residual: float
    slack_min: dict[str, float]
    active_counts: dict[str, int]
    post_collision_slack: float
    post_position_slack: float
    velocity_cmd_slack: float
    apf_separation: float
    pd_torque_norm: float = 0.0
    pd_torque_max: float = 0.0


@dataclass
class CommandStepLog:
    index: int
    time: float
    command_pre: np.ndarray
    command_post: np.ndarray
    joint_positions: np.ndarray
    joint_velocities: np.ndarray
    rewards: dict[str, float]
    arm_obs_checksum: int
    hand_obs_checksum: int
    critic_obs_checksum: int = 0
    substeps: list[SubstepLog] = field(default_factory=list)


@dataclass
class RolloutRecord:
    scenario: str
    seed: int
    platform: str
    object_box: rw.Mvbb
    object_mass: float
    lift_command: rw.LiftCommand
    steps: list[CommandStepLog] = field(default_factory=list)
    success: bool = False
    time_to_success: float = float("nan")
    time_to_goal: float = float("nan")
    terminated: bool = False
    aborted: bool = False
    final_pos_error: float = float("nan")
    final_ori_error: float = float("nan")
    slack_minima: dict[str, float] = field(default_factory=dict)
    min_post_collision_slack: float = float("nan")
    min_apf_separation: float = float("nan")

    def all_substeps(self) -> list[SubstepLog]:
        return [s for step in self.steps for s in step.substeps]

    def controller_steps(self) -> list["_ProfileStep"]:
        return [
            _ProfileStep(s.command_norm, s.tracking_error, s.active_counts, s.slack_min)
            for s in self.all_substeps()
        ]

    def summary_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "platform": self.platform,
            "steps": len(self.steps),
            "success": self.success,
            "time_to_success": self.time_to_success,
            "time_to_goal": self.time_to_goal,
            "terminated": self.terminated,
            "aborted": self.aborted,
            "final_pos_error": self.final_pos_error,
            "final_ori_error": self.final_ori_error,
            "slack_minima": self.slack_minima,
            "min_post_collision_slack": self.min_post_collision_slack,
            "min_apf_separation": self.min_apf_separation,
            "object_dimensions": self.object_box.dimensions.tolist(),
            "object_mass": self.object_mass,
        }


@dataclass
class _ProfileStep:
    command_norm: float
    tracking_error: float
    active_counts: dict[str, int]
    slack_min: dict[str, float]


def _checksum(vec: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(vec, dtype=float).tobytes())


# ---------------------------------------------------------------------------
# rollout loop
# ---------------------------------------------------------------------------

def run_episode(scenario: Scenario, policy: Policy, seed: int = 0) -> RolloutRecord:
    """One deterministic episode: sample object and lift command, run the command
    loop with five controller substeps per command, audit constraints inline."""
    scenario.validate()
    model = scenario.model
    rng = np.random.default_rng(seed)
    mvbb, mass = sample_object(scenario, rng)
    lift = sample_lift(scenario, rng)
    policy.reset(seed)

    record = RolloutRecord(
        scenario=scenario.name, seed=seed, platform=model.platform,
        object_box=mvbb, object_mass=mass, lift_command=lift,
    )

    n = model.n
    fingers = model.fingers
    dt = scenario.controller_dt
    period = scenario.command_period
    substeps = scenario.substeps
    n_steps = int(round(scenario.episode_length * scenario.command_rate))
    threshold = rw.golden_zone_threshold(mvbb, scenario.reward)

    state = PlantState(JointState(scenario.home_q.copy(), np.zeros(n)), 0.0)
    kin = evaluate(model, state.joint.positions)
    warm = None
    prev_arm = np.zeros(6)
    prev_arm2 = np.zeros(6)
    prev_hand = np.zeros(3 * len(fingers))
    prev_hand2 = np.zeros(3 * len(fingers))
    q_min, q_max = model.position_limits
    qd_min, qd_max = model.velocity_limits
    scale = scenario.ik.velocity_limit_scale
    slack_minima = {f: np.inf for f in CONSTRAINT_FAMILIES}
    min_post_collision = np.inf
    min_apf_sep = np.inf
    hold_time = 0.0
    term_pairs = [tuple(tp.split("|")) for tp in scenario.termination_pairs]
    pair_index = {pair: i for i, pair in enumerate(scenario.collision.pairs)}
    term_rows = [pair_index[p] for p in term_pairs if p in pair_index]
    term_rows += [pair_index[(b, a)] for a, b in term_pairs if (b, a) in pair_index]

    for k in range(n_steps):
        t_cmd = k * period
        palm_twist_world = Twist.from_vector(
            kin.frame_jacobian(model.palm_frame) @ state.joint.velocities
        )
        arm_obs = rw.assemble_arm_observation(model, state.joint, mvbb, lift, prev_arm)
        arm_action = np.asarray(policy.arm_action(arm_obs), dtype=float).reshape(6)
        hand_obs = rw.assemble_hand_observation(
            model, state.joint, mvbb, prev_hand, palm_twist_world, arm_action, kin=kin
        )
        hand_action = np.asarray(policy.hand_action(hand_obs), dtype=float).reshape(
            3 * len(fingers))

        if not (np.all(np.isfinite(arm_action)) and np.all(np.isfinite(hand_action))):
            record.aborted = True
            break

        cmd_vec = np.concatenate([arm_action, hand_action])
        cmd_pre = ControlCommand.from_vector(cmd_vec, fingers)
        if scenario.apf is not None:
            palm_p = kin.frame_point(model.palm_frame)
            cmd_post = steer_mod.apf_modulate(palm_p, cmd_pre, scenario.apf)
        else:
            cmd_post = cmd_pre

        critic_obs = rw.assemble_critic_observation(arm_obs, prev_hand)
        step_log = CommandStepLog(
            index=k, time=t_cmd,
            command_pre=cmd_pre.as_vector(fingers),
            command_post=cmd_post.as_vector(fingers),
            joint_positions=state.joint.positions.copy(),
            joint_velocities=state.joint.velocities.copy(),
            rewards={},
            arm_obs_checksum=_checksum(arm_obs),
            hand_obs_checksum=_checksum(hand_obs),
            critic_obs_checksum=_checksum(critic_obs),
        )

        illegal = False
        for j in range(substeps):
            q_now = state.joint.positions
            qd_now = state.joint.velocities
            qd_des, diag = control_step(
                model, scenario.collision, q_now, cmd_post, scenario.ik,
                warm_start=warm, kin=kin,
            )
            warm = qd_des
            # PD torque of the tracking layer; logged only (kinematic plant)
            q_des = plant_mod.integrate_desired(q_now, qd_des, dt)
            tau = plant_mod.pd_torque(q_now, qd_now, q_des, qd_des, scenario.gains)
            state = plant_mod.step(model, state, qd_des, dt, scenario.lag_time_constant)
            state.time = (k * substeps + j + 1) * dt  # integer-derived, drift-free
            kin = evaluate(model, state.joint.positions)

            # post-step audits at the realized state
            dists, _ = collision_distances(model, scenario.collision, state.joint.positions,
                                           kin=kin, with_gradients=False)
            post_coll = float(np.min(dists - scenario.ik.safety_margin)) if dists.size else np.inf
            q_unclamped = q_now + state.joint.velocities * dt
            post_pos = float(np.min(np.minimum(q_max - q_unclamped, q_unclamped - q_min)))
            vel_slack = float(np.min(np.minimum(scale * qd_max - qd_des,
                                                qd_des - scale * qd_min)))
            if scenario.apf is not None:
                seps = steer_mod.obstacle_separations(kin.frame_point(model.palm_frame),
                                                      scenario.apf)
                apf_sep = float(seps.min()) if seps.size else np.inf
                min_apf_sep = min(min_apf_sep, apf_sep)
            else:
                apf_sep = np.nan
            if term_rows and np.any(dists[term_rows] < 0.0):
                illegal = True

            for fam in CONSTRAINT_FAMILIES:
                slack_minima[fam] = min(slack_minima[fam], diag.slack_min[fam])
            min_post_collision = min(min_post_collision, post_coll)

            step_log.substeps.append(SubstepLog(
                time=state.time,
                command_norm=diag.command_norm,
                tracking_error=diag.tracking_error,
                status=diag.status,
                newton_iterations=diag.solution.newton_iterations,
                kkt_residual=diag.solution.kkt_residual,
                slack_min=dict(diag.slack_min),
                active_counts=dict(diag.active_counts),
                post_collision_slack=post_coll,
                post_position_slack=post_pos,
                velocity_cmd_slack=vel_slack,
                apf_separation=apf_sep,
                pd_torque_norm=float(np.linalg.norm(tau)),
                pd_torque_max=float(np.abs(tau).max()),
            ))

        # rewards at the command rate, evaluated at the post-substep state
        palm_pose = kin.frame_pose(model.palm_frame)
        d_po = float(np.linalg.norm(mvbb.position - palm_pose.translation))
        r_dist = rw.golden_zone_reward(palm_pose.translation, mvbb, scenario.reward)
        r_align = rw.alignment_reward(palm_pose, palm_pose.translation, mvbb, r_dist,
                                      scenario.reward)
        contacts = rw.contact_proxy(model, state.joint.positions, mvbb,
                                    scenario.reward.contact_tolerance, kin=kin)
        grasped = rw.grasp_indicator(d_po, threshold, contacts)
        r_grasp = rw.grasp_reward(d_po, threshold, contacts)
        r_lift = rw.lift_reward(palm_pose, lift, grasped, scenario.reward)
        s1_arm, s2_arm = rw.smoothness_penalties(arm_action, prev_arm, prev_arm2, period)
        s1_hand, s2_hand = rw.smoothness_penalties(hand_action, prev_hand, prev_hand2, period)
        r_term = rw.termination_penalty(illegal)
        step_log.rewards = {
            "distance": r_dist,
            "alignment": r_align,
            "contacts": float(contacts),
            "grasp_indicator": float(grasped),
            "grasp": float(r_grasp),
            "lift": r_lift,
            "smoothness_1st_arm": s1_arm,
            "smoothness_2nd_arm": s2_arm,
            "smoothness_1st_hand": s1_hand,
            "smoothness_2nd_hand": s2_hand,
            "termination": r_term,
        }
        arm_total, hand_total = rw.weighted_totals(scenario.reward, step_log.rewards)
        step_log.rewards["arm_weighted_total"] = arm_total
        step_log.rewards["hand_weighted_total"] = hand_total
        record.steps.append(step_log)

        # success proxy: palm near the lift position with a sustained contact hold
        near = float(np.linalg.norm(palm_pose.translation - lift.position)) <= scenario.success_pos_tol
        if near and contacts >= scenario.success_contacts:
            hold_time += period
            if not record.success and hold_time >= scenario.success_hold:
                record.success = True
                record.time_to_success = state.time
        else:
            hold_time = 0.0

        if scenario.reach_goal is not None and np.isnan(record.time_to_goal):
            goal_p, goal_tol = scenario.reach_goal
            if float(np.linalg.norm(palm_pose.translation - goal_p)) <= goal_tol:
                record.time_to_goal = state.time

        prev_arm2, prev_arm = prev_arm, arm_action
        prev_hand2, prev_hand = prev_hand, hand_action
        if illegal:
            record.terminated = True
            break

    palm_pose = kin.frame_pose(model.palm_frame)
    record.final_pos_error = float(np.linalg.norm(palm_pose.translation - lift.position))
    q_palm = quat_from_matrix(palm_pose.rotation)
    record.final_ori_error = float(quat_angle(
        quat_multiply(lift.orientation, quat_conjugate(q_palm))))
    record.slack_minima = {f: float(v) for f, v in slack_minima.items()}
    record.min_post_collision_slack = float(min_post_collision)
    record.min_apf_separation = float(min_apf_sep) if scenario.apf is not None else float("nan")
    return record


# ---------------------------------------------------------------------------
# batch evaluation
# ---------------------------------------------------------------------------

@dataclass
class BatchSummary:
    """The four headline metrics plus bookkeeping over a batch of episodes."""

    episodes: int
    success_rate: float
    mean_time_to_success: float
    mean_pos_error: float
    mean_ori_error: float
    mean_time_to_goal: float
    terminated: int
    aborted: int

    def to_dict(self) -> dict:
        return {
            "episodes": self.episodes,
            "success_rate": self.success_rate,
            "mean_time_to_success": self.mean_time_to_success,
            "mean_pos_error": self.mean_pos_error,
            "mean_ori_error": self.mean_ori_error,
            "mean_time_to_goal": self.mean_time_to_goal,
            "terminated": self.terminated,
            "aborted": self.aborted,
        }


def resolve_workers(workers: int | None) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get(WORKERS_ENV_VAR)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def summarize(records: Sequence[RolloutRecord]) -> BatchSummary:
    successes = [r for r in records if r.success]
    tts = [r.time_to_success for r in successes]
    goals = [r.time_to_goal for r in records if np.isfinite(r.time_to_goal)]
    return BatchSummary(
        episodes=len(records),
        success_rate=len(successes) / len(records) if records else 0.0,
        mean_time_to_success=float(np.mean(tts)) if tts else float("nan"),
        mean_pos_error=float(np.mean([r.final_pos_error for r in records])) if records else float("nan"),
        mean_ori_error=float(np.mean([r.final_ori_error for r in records])) if records else float("nan"),
        mean_time_to_goal=float(np.mean(goals)) if goals else float("nan"),
        terminated=sum(1 for r in records if r.terminated),
        aborted=sum(1 for r in records if r.aborted),
    )


def run_batch(
    scenario: Scenario,
    policy_factory: Callable[[], Policy],
    n_episodes: int,
    workers: int | None = None,
    base_seed: int = 0,
) -> tuple[BatchSummary, list[RolloutRecord]]:
    """Run independent episodes (seeded base_seed + i) over a worker pool.

    Episodes are CPU-bound fine-grained numpy work, so parallel execution uses
    processes; policies are constructed in the parent and shipped per task.
    """
    n_workers = resolve_workers(workers)
    seeds = [base_seed + i for i in range(n_episodes)]
    if n_workers <= 1 or n_episodes <= 1:
        records = [run_episode(scenario, policy_factory(), s) for s in seeds]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            futures = [pool.submit(run_episode, scenario, policy_factory(), s) for s in seeds]
            records = [f.result() for f in futures]
    return summarize(records), records


# ---------------------------------------------------------------------------
# record serialization (delimited text + JSON summary)
# ---------------------------------------------------------------------------

def substep_rows(record: RolloutRecord) -> list[list]:
    header = [
        "cmd_step", "substep", "time", "command_norm", "tracking_error", "status",
        "newton_iterations", "kkt_residual",
    ]
    header += [f"slack_{f}" for f in CONSTRAINT_FAMILIES]
    header += [f"active_{f}" for f in CONSTRAINT_FAMILIES]
    header += ["post_collision_slack", "post_position_slack", "velocity_cmd_slack",
               "apf_separation", "pd_torque_norm", "pd_torque_max"]
    rows: list[list] = [header]
    for step in record.steps:
        for j, ss in enumerate(step.substeps):
            row = [step.index, j, ss.time, ss.command_norm, ss.tracking_error, ss.status,
                   ss.newton_iterations, ss.kkt_residual]
            row += [ss.slack_min[f] for f in CONSTRAINT_FAMILIES]
            row += [ss.active_counts[f] for f in CONSTRAINT_FAMILIES]
            row += [ss.post_collision_slack, ss.post_position_slack, ss.velocity_cmd_slack,
                    ss.apf_separation, ss.pd_torque_norm, ss.pd_torque_max]
            rows.append(row)
    return rows


def command_rows(record: RolloutRecord) -> list[list]:
    if not record.steps:
        return [["cmd_step", "time"]]
    reward_keys = sorted(record.steps[0].rewards)
    dim = record.steps[0].command_pre.shape[0]
    header = ["cmd_step", "time", "arm_obs_crc32", "hand_obs_crc32", "critic_obs_crc32"]
    header += [f"cmd_pre_{i}" for i in range(dim)]
    header += [f"cmd_post_{i}" for i in range(dim)]
    header += [f"reward_{k}" for k in reward_keys]
    rows: list[list] = [header]
    for step in record.steps:
        row = [step.index, step.time, step.arm_obs_checksum, step.hand_obs_checksum,
               step.critic_obs_checksum]
        row += [float(v) for v in step.command_pre]
        row += [float(v) for v in step.command_post]
        row += [step.rewards[k] for k in reward_keys]
        rows.append(row)
    return rows


def write_record(record: RolloutRecord, out_dir: str | Path) -> dict[str, Path]:
    """Write one episode: substep log, command log, and a JSON summary."""
    import csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{record.scenario}_seed{record.seed}"
    paths = {
        "substeps": out / f"{stem}_substeps.csv",
        "commands": out / f"{stem}_commands.csv",
        "summary": out / f"{stem}_summary.json",
    }
    for key, rows in (("substeps", substep_rows(record)), ("commands", command_rows(record))):
        with open(paths[key], "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
    with open(paths["summary"], "w") as fh:
        json.dump(record.summary_dict(), fh, indent=2, sort_keys=True)
    return paths
