"""Batch array interface to the graspctl control stack.

External training/simulation loops hand over contiguous arrays and get arrays
back; no objects cross the boundary. A handle bundles a loaded chain, the
controller configuration, and an optional worker pool:

    handle = create(scenario="grasp5f", workers=2)
    qd, status, slack = batch_control_step(handle, q_batch, command_batch)
    close(handle)

Status codes: 0 converged, 1 iteration budget exhausted, 2 numerical failure.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from graspctl import qpcore
from graspctl.harness import load_scenario
from graspctl.ikcontrol import (
    CONSTRAINT_FAMILIES,
    CollisionModel,
    ControlCommand,
    IkConfig,
    control_step,
)
from graspctl.kinematics import ChainModel, JointState, Twist, evaluate, load_chain
from graspctl.rewards import (
    LiftCommand,
    Mvbb,
    assemble_arm_observation,
    assemble_hand_observation,
    observation_dimensions,
)

__all__ = [
    "BindingError",
    "BatchHandle",
    "create",
    "close",
    "batch_control_step",
    "batch_solve",
    "assemble_observations",
    "STATUS_CODES",
]

STATUS_CODES = {
    qpcore.STATUS_CONVERGED: 0,
    qpcore.STATUS_MAX_ITERS: 1,
    qpcore.STATUS_NUMERICAL_FAILURE: 2,
}


class BindingError(ValueError):
    pass


@dataclass
class BatchHandle:
    """Opaque bundle: chain + collision model + IK config + lazily created pool.
    Concurrent calls on one handle are serialized; separate handles are
    independent."""

    model: ChainModel
    collision: CollisionModel
    ik: IkConfig
    workers: int = 1
    _pool: ThreadPoolExecutor | None = field(default=None, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _closed: bool = field(default=False, repr=False)

    def dimensions(self) -> dict:
        arm_dim, hand_dim = observation_dimensions(self.model)
        return {
            "n_joints": self.model.n,
            "n_arm": self.model.n_arm,
            "fingers": list(self.model.fingers),
            "command_dim": 6 + 3 * len(self.model.fingers),
            "arm_obs_dim": arm_dim,
            "hand_obs_dim": hand_dim,
        }

    def _require_open(self) -> None:
        if self._closed:
            raise BindingError("handle is closed")

    def _executor(self) -> ThreadPoolExecutor:
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self.workers)
        return self._pool

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None
        self._closed = True

    def __enter__(self) -> "BatchHandle":
        self._require_open()
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def create(
    chain: str | None = None,
    scenario: str | None = None,
    ik_overrides: Mapping | None = None,
    workers: int = 1,
) -> BatchHandle:
    """Build a handle from a chain description file and/or a scenario file.

    A scenario supplies the chain, collision spheres/pairs, and controller
    config; a bare chain gets an empty collision model and defaults.
    """
    if scenario is not None:
        scen = load_scenario(scenario)
        model = scen.model if chain is None else load_chain(chain)
        collision = scen.collision
        ik_cfg = scen.ik
    elif chain is not None:
        model = load_chain(chain)
        collision = CollisionModel()
        ik_cfg = IkConfig()
    else:
        raise BindingError("create() needs a chain or a scenario")
    if ik_overrides:
        import dataclasses

        ik_cfg = dataclasses.replace(ik_cfg, **dict(ik_overrides))
    if workers < 1:
        raise BindingError("workers must be >= 1")
    return BatchHandle(model=model, collision=collision, ik=ik_cfg, workers=workers)


def close(handle: BatchHandle) -> None:
    handle.close()


def _check_shape(name: str, arr: np.ndarray, expected: tuple) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=float)
    if arr.shape != expected:
        raise BindingError(f"{name} must have shape {expected}, got {arr.shape}")
    return arr


def batch_control_step(
    handle: BatchHandle,
    q_batch: np.ndarray,
    command_batch: np.ndarray,
    warm_starts: np.ndarray | None = None,
):
    """Velocity-IK step for a batch of states and task-space commands.

    Returns (qd_des (B,n), status codes (B,), slack minima (B,3) ordered
    [collision, position, velocity]); numerically identical to looping
    control_step over the rows.
    """
    handle._require_open()
    q_batch = np.ascontiguousarray(q_batch, dtype=float)
    if q_batch.ndim != 2 or q_batch.shape[1] != handle.model.n:
        raise BindingError(
            f"q_batch must have shape (B, {handle.model.n}), got {q_batch.shape}")
    batch = q_batch.shape[0]
    cmd_dim = 6 + 3 * len(handle.model.fingers)
    command_batch = _check_shape("command_batch", command_batch, (batch, cmd_dim))
    if warm_starts is not None:
        warm_starts = _check_shape("warm_starts", warm_starts, (batch, handle.model.n))

    def one(i: int):
        cmd = ControlCommand.from_vector(command_batch[i], handle.model.fingers)
        warm = warm_starts[i] if warm_starts is not None else None
        qd, diag = control_step(handle.model, handle.collision, q_batch[i], cmd,
                                handle.ik, warm_start=warm)
        slacks = [diag.slack_min[f] for f in CONSTRAINT_FAMILIES]
        return qd, STATUS_CODES[diag.status], slacks

    with handle._lock:
        if handle.workers > 1 and batch > 1:
            results = list(handle._executor().map(one, range(batch)))
        else:
            results = [one(i) for i in range(batch)]

    qd_out = np.stack([r[0] for r in results])
    status = np.array([r[1] for r in results], dtype=np.int8)
    slack = np.array([r[2] for r in results])
    return qd_out, status, slack


def batch_solve(
    H: np.ndarray,
    g: np.ndarray,
    A_ineq: np.ndarray | None = None,
    b_ineq: np.ndarray | None = None,
    A_eq: np.ndarray | None = None,
    b_eq: np.ndarray | None = None,
    config: Mapping | None = None,
    workers: int | None = None,
):
    """Solve a batch of dense QPs given as stacked raw arrays.

    H: (B,n,n), g: (B,n); optional stacked constraint blocks. Returns
    (x (B,n), status codes (B,), kkt residuals (B,)).
    """
    H = np.ascontiguousarray(H, dtype=float)
    g = np.ascontiguousarray(g, dtype=float)
    if H.ndim != 3 or g.ndim != 2 or H.shape[:2] != (g.shape[0], g.shape[1]) \
            or H.shape[1] != H.shape[2]:
        raise BindingError(
            f"H must be (B, n, n) and g (B, n); got {H.shape} and {g.shape}")
    batch = H.shape[0]
    problems = []
    for i in range(batch):
        problems.append(qpcore.QpProblem(
            H=H[i], g=g[i],
            A_ineq=None if A_ineq is None else A_ineq[i],
            b_ineq=None if b_ineq is None else b_ineq[i],
            A_eq=None if A_eq is None else A_eq[i],
            b_eq=None if b_eq is None else b_eq[i],
        ))
    cfg = qpcore.BarrierConfig(**dict(config)) if config else None
    solutions = qpcore.solve_batch(problems, cfg, workers=workers)
    x = np.stack([s.x for s in solutions])
    status = np.array([STATUS_CODES[s.status] for s in solutions], dtype=np.int8)
    kkt = np.array([s.kkt_residual for s in solutions])
    return x, status, kkt


def assemble_observations(
    handle: BatchHandle,
    q: np.ndarray,
    qd: np.ndarray,
    object_position: np.ndarray,
    object_orientation: np.ndarray,
    object_dimensions: np.ndarray,
    lift_command: np.ndarray,
    prev_arm_action: np.ndarray,
    prev_hand_action: np.ndarray,
    arm_action: np.ndarray,
):
    """Actor observations for a batch of states; the palm twist fed to the hand
    agent is computed from (q, qd) through the palm Jacobian.

    Returns (arm_obs (B, arm_dim), hand_obs (B, hand_dim)).
    """
    handle._require_open()
    model = handle.model
    n = model.n
    q = np.ascontiguousarray(q, dtype=float)
    if q.ndim != 2 or q.shape[1] != n:
        raise BindingError(f"q must have shape (B, {n}), got {q.shape}")
    batch = q.shape[0]
    n_tips = 3 * len(model.fingers)
    qd = _check_shape("qd", qd, (batch, n))
    object_position = _check_shape("object_position", object_position, (batch, 3))
    object_orientation = _check_shape("object_orientation", object_orientation, (batch, 4))
    object_dimensions = _check_shape("object_dimensions", object_dimensions, (batch, 3))
    lift_command = _check_shape("lift_command", lift_command, (batch, 7))
    prev_arm_action = _check_shape("prev_arm_action", prev_arm_action, (batch, 6))
    prev_hand_action = _check_shape("prev_hand_action", prev_hand_action, (batch, n_tips))
    arm_action = _check_shape("arm_action", arm_action, (batch, 6))

    arm_dim, hand_dim = observation_dimensions(model)
    arm_out = np.empty((batch, arm_dim))
    hand_out = np.empty((batch, hand_dim))
    with handle._lock:
        for i in range(batch):
            state = JointState(q[i], qd[i])
            box = Mvbb(object_position[i], object_orientation[i], object_dimensions[i])
            cmd = LiftCommand(lift_command[i, :3], lift_command[i, 3:])
            kin = evaluate(model, q[i])
            twist = Twist.from_vector(kin.frame_jacobian(model.palm_frame) @ qd[i])
            arm_out[i] = assemble_arm_observation(model, state, box, cmd,
                                                  prev_arm_action[i])
            hand_out[i] = assemble_hand_observation(model, state, box,
                                                    prev_hand_action[i], twist,
                                                    arm_action[i], kin=kin)
    return arm_out, hand_out
