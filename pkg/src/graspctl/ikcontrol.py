"""Velocity inverse kinematics as a constrained QP.

Objective: palm-twist + fingertip-velocity tracking with velocity regularization.
Constraints: linearized collision clearance over a planning horizon, joint
position limits over the same horizon, and (scalable) joint velocity limits.
Row layout of the assembled inequality block: [collision | position | velocity].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import qpcore
from .kinematics import ChainModel, KinematicsEval, Twist, evaluate, fingertip_jacobian_linear

CONSTRAINT_FAMILIES = ("collision", "position", "velocity")


class IkError(ValueError):
    """Raised for malformed commands, collision models, or configs."""


@dataclass(frozen=True)
class ControlCommand:
    """High-level action: desired palm twist in world frame plus desired fingertip
    linear velocities in the palm frame, one per finger."""

    palm_twist: Twist
    fingertip_velocities: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        clean = {k: np.asarray(v, dtype=float).reshape(3) for k, v in self.fingertip_velocities.items()}
        object.__setattr__(self, "fingertip_velocities", clean)

    @staticmethod
    def zero(fingers: Sequence[str] = ()) -> "ControlCommand":
        return ControlCommand(Twist.zero(), {f: np.zeros(3) for f in fingers})

    @staticmethod
    def from_vector(vec: np.ndarray, fingers: Sequence[str]) -> "ControlCommand":
        vec = np.asarray(vec, dtype=float).reshape(-1)
        if vec.shape[0] != 6 + 3 * len(fingers):
            raise IkError(f"command vector must have {6 + 3 * len(fingers)} entries")
        tips = {f: vec[6 + 3 * i: 9 + 3 * i] for i, f in enumerate(fingers)}
        return ControlCommand(Twist.from_vector(vec[:6]), tips)

    def as_vector(self, fingers: Sequence[str]) -> np.ndarray:
        parts = [self.palm_twist.as_vector()]
        parts += [self.fingertip_velocities[f] for f in fingers]
        return np.concatenate(parts) if parts else np.zeros(6)

    def validate_for(self, model: ChainModel) -> None:
        if set(self.fingertip_velocities) != set(model.fingers):
            raise IkError(
                f"command fingertip set {sorted(self.fingertip_velocities)} does not match "
                f"platform fingers {sorted(model.fingers)}"
            )

    def norm(self) -> float:
        return float(np.linalg.norm(self.palm_twist.as_vector()))


@dataclass(frozen=True)
class Sphere:
    name: str
    frame: str
    offset: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float).reshape(3))
        if self.radius <= 0.0:
            raise IkError(f"sphere {self.name}: radius must be positive")


@dataclass(frozen=True)
class HalfSpace:
    """Environment half space, e.g. the table: points with n.(x - p) >= 0 are free."""

    name: str
    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float).reshape(3))
        normal = np.asarray(self.normal, dtype=float).reshape(3)
        norm = np.linalg.norm(normal)
        if norm < 1e-9:
            raise IkError(f"half space {self.name}: zero normal")
        object.__setattr__(self, "normal", normal / norm)


@dataclass(frozen=True)
class CollisionModel:
    """Spheres attached to robot frames, environment half spaces, and the distance
    pairs to monitor (robot-environment and self collision)."""

    spheres: tuple[Sphere, ...] = ()
    half_spaces: tuple[HalfSpace, ...] = ()
    pairs: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        sphere_idx = {s.name: i for i, s in enumerate(self.spheres)}
        half_idx = {h.name: i for i, h in enumerate(self.half_spaces)}
        if len(sphere_idx) != len(self.spheres) or len(half_idx) != len(self.half_spaces):
            raise IkError("duplicate collision body names")
        resolved = []
        for a, b in self.pairs:
            if a in sphere_idx and b in sphere_idx:
                resolved.append(("ss", sphere_idx[a], sphere_idx[b]))
            elif a in sphere_idx and b in half_idx:
                resolved.append(("sh", sphere_idx[a], half_idx[b]))
            elif b in sphere_idx and a in half_idx:
                resolved.append(("sh", sphere_idx[b], half_idx[a]))
            else:
                raise IkError(f"collision pair ({a}, {b}) references unknown bodies")
        object.__setattr__(self, "_resolved", tuple(resolved))

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class IkConfig:
    """Velocity-IK weights and margins.

    lam regularizes joint velocities; horizon converts velocities into the
    position/collision lookahead; safety_margin is the hard clearance kept by the
    linearized collision rows; velocity_limit_scale uniformly tightens the
    admissible joint-velocity box.
    """

    lam: float = 1e-3
    horizon: float = 0.01
    safety_margin: float = 0.01
    velocity_limit_scale: float = 1.0
    barrier: qpcore.BarrierConfig = field(default_factory=qpcore.BarrierConfig)
    activation_tolerance: float = 1e-5

    def __post_init__(self):
        if self.lam <= 0.0 or self.horizon <= 0.0 or self.safety_margin <= 0.0:
            raise IkError("lam, horizon, and safety_margin must be positive")
        if not 0.0 < self.velocity_limit_scale <= 1.0:
            raise IkError("velocity_limit_scale must lie in (0, 1]")


def collision_distances(
    model: ChainModel,
    cm: CollisionModel,
    q: np.ndarray,
    kin: KinematicsEval | None = None,
    with_gradients: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Surface-to-surface signed distance and its configuration gradient per pair.

    Sphere-sphere: ||c1 - c2|| - r1 - r2; sphere-half-space: n.(c - p) - r. The
    gradient is assembled through the attached frames' positional Jacobians.
    Coincident sphere centers fall back to a fixed +z separation direction.
    with_gradients=False skips the Jacobian work (distance-only audits).
    """
    k = kin if kin is not None else evaluate(model, q)
    n = model.n
    dists = np.zeros(cm.n_pairs)
    grads = np.zeros((cm.n_pairs, n)) if with_gradients else np.zeros((0, n))
    centers: dict[int, np.ndarray] = {}
    jacs: dict[int, np.ndarray] = {}

    def sphere_center(i: int) -> np.ndarray:
        if i not in centers:
            centers[i] = k.frame_point(cm.spheres[i].frame, cm.spheres[i].offset)
        return centers[i]

    def sphere_jac(i: int) -> np.ndarray:
        if i not in jacs:
            jacs[i] = k.point_jacobian(cm.spheres[i].frame, cm.spheres[i].offset)
        return jacs[i]

    for row, (kind, i, j) in enumerate(cm._resolved):
        if kind == "ss":
            ci, cj = sphere_center(i), sphere_center(j)
            diff = ci - cj
            sep = float(np.linalg.norm(diff))
            dists[row] = sep - cm.spheres[i].radius - cm.spheres[j].radius
            if with_gradients:
                direction = diff / sep if sep > 1e-12 else np.array([0.0, 0.0, 1.0])
                grads[row] = direction @ (sphere_jac(i) - sphere_jac(j))
        else:
            half = cm.half_spaces[j]
            c = sphere_center(i)
            dists[row] = float(half.normal @ (c - half.point)) - cm.spheres[i].radius
            if with_gradients:
                grads[row] = half.normal @ sphere_jac(i)
    return dists, grads


def constraint_row_slices(n_joints: int, n_pairs: int) -> dict[str, slice]:
    """Row ranges of the assembled inequality block, by constraint family."""
    return {
        "collision": slice(0, n_pairs),
        "position": slice(n_pairs, n_pairs + 2 * n_joints),
        "velocity": slice(n_pairs + 2 * n_joints, n_pairs + 4 * n_joints),
    }


def assemble_qp(
    model: ChainModel,
    cm: CollisionModel,
    q: np.ndarray,
    cmd: ControlCommand,
    cfg: IkConfig,
    kin: KinematicsEval | None = None,
) -> qpcore.QpProblem:
    """Build the velocity-IK QP at configuration q for one command."""
    cmd.validate_for(model)
    q = model.check_q(q)
    k = kin if kin is not None else evaluate(model, q)
    n = model.n

    j_palm = k.frame_jacobian(model.palm_frame)
    v_des = cmd.palm_twist.as_vector()
    if not (np.all(np.isfinite(v_des)) and np.all(np.isfinite(j_palm))):
        raise IkError("non-finite palm command or Jacobian")

    H = j_palm.T @ j_palm + cfg.lam * np.eye(n)
    g = -j_palm.T @ v_des
    for finger in model.fingers:
        j_tip = fingertip_jacobian_linear(model, q, finger, kin=k)
        v_tip = cmd.fingertip_velocities[finger]
        if not (np.all(np.isfinite(v_tip)) and np.all(np.isfinite(j_tip))):
            raise IkError(f"non-finite command or Jacobian for finger '{finger}'")
        H += j_tip.T @ j_tip
        g -= j_tip.T @ v_tip

    dists, dgrads = collision_distances(model, cm, q, kin=k)
    q_min, q_max = model.position_limits
    qd_min, qd_max = model.velocity_limits
    s = cfg.velocity_limit_scale
    hor = cfg.horizon
    eye = np.eye(n)

    a_rows = np.vstack([
        -hor * dgrads,
        hor * eye,
        -hor * eye,
        eye,
        -eye,
    ])
    b_rows = np.concatenate([
        dists - cfg.safety_margin,
        q_max - q,
        q - q_min,
        s * qd_max,
        -s * qd_min,
    ])
    if not (np.all(np.isfinite(a_rows)) and np.all(np.isfinite(b_rows))):
        raise IkError("non-finite constraint data")
    return qpcore.QpProblem(H=H, g=g, A_ineq=a_rows, b_ineq=b_rows)


@dataclass
class ControlDiagnostics:
    """Per-solve audit: QP outcome, task-space tracking errors, and constraint
    margins grouped by family (collision / position / velocity)."""

    solution: qpcore.QpSolution
    command_norm: float
    tracking_error: float
    fingertip_errors: dict[str, float]
    slack_min: dict[str, float]
    active_counts: dict[str, int]

    @property
    def status(self) -> str:
        return self.solution.status


def _family_stats(problem: qpcore.QpProblem, qd: np.ndarray, n: int, n_pairs: int,
                  activation_tol: float) -> tuple[dict[str, float], dict[str, int]]:
    slack = problem.b_ineq - problem.A_ineq @ qd
    slices = constraint_row_slices(n, n_pairs)
    mins = {}
    counts = {}
    for fam, sl in slices.items():
        rows = slack[sl]
        mins[fam] = float(rows.min()) if rows.size else np.inf
        counts[fam] = int(np.sum(rows <= activation_tol)) if rows.size else 0
    return mins, counts


def control_step(
    model: ChainModel,
    cm: CollisionModel,
    q: np.ndarray,
    cmd: ControlCommand,
    cfg: IkConfig,
    warm_start: np.ndarray | None = None,
    kin: KinematicsEval | None = None,
) -> tuple[np.ndarray, ControlDiagnostics]:
    """Assemble and solve the IK QP; on numerical failure command zero velocity."""
    n = model.n
    try:
        if kin is None:
            kin = evaluate(model, q)
        problem = assemble_qp(model, cm, q, cmd, cfg, kin=kin)
    except (IkError, qpcore.QpError):
        failed = qpcore.QpSolution(
            x=np.zeros(n), status=qpcore.STATUS_NUMERICAL_FAILURE, kkt_residual=np.inf,
            newton_iterations=0, max_constraint_violation=np.nan,
        )
        diag = ControlDiagnostics(
            solution=failed, command_norm=np.nan, tracking_error=np.nan,
            fingertip_errors={}, slack_min={f: np.nan for f in CONSTRAINT_FAMILIES},
            active_counts={f: 0 for f in CONSTRAINT_FAMILIES},
        )
        return np.zeros(n), diag

    sol = qpcore.solve(problem, cfg.barrier, warm_start)
    qd = sol.x if sol.status != qpcore.STATUS_NUMERICAL_FAILURE else np.zeros(n)

    j_palm = kin.frame_jacobian(model.palm_frame)
    v_des = cmd.palm_twist.as_vector()
    tracking_error = float(np.linalg.norm(v_des - j_palm @ qd))
    tip_errors = {}
    for finger in model.fingers:
        j_tip = fingertip_jacobian_linear(model, q, finger, kin=kin)
        tip_errors[finger] = float(
            np.linalg.norm(cmd.fingertip_velocities[finger] - j_tip @ qd)
        )
    mins, counts = _family_stats(problem, qd, n, cm.n_pairs, cfg.activation_tolerance)
    diag = ControlDiagnostics(
        solution=sol,
        command_norm=cmd.norm(),
        tracking_error=tracking_error,
        fingertip_errors=tip_errors,
        slack_min=mins,
        active_counts=counts,
    )
    return qd, diag


# ---------------------------------------------------------------------------
# scenario-file section parsing
# ---------------------------------------------------------------------------

def collision_model_from_dict(data: Mapping) -> CollisionModel:
    spheres = tuple(
        Sphere(s["name"], s["frame"], np.asarray(s.get("offset", [0, 0, 0]), dtype=float),
               float(s["radius"]))
        for s in data.get("spheres", [])
    )
    half_spaces = tuple(
        HalfSpace(h["name"], np.asarray(h["point"], dtype=float),
                  np.asarray(h["normal"], dtype=float))
        for h in data.get("half_spaces", [])
    )
    pairs = tuple((p["a"], p["b"]) for p in data.get("pairs", []))
    return CollisionModel(spheres=spheres, half_spaces=half_spaces, pairs=pairs)


def ik_config_from_dict(data: Mapping) -> IkConfig:
    barrier_data = data.get("barrier", {})
    barrier = qpcore.BarrierConfig(**barrier_data) if barrier_data else qpcore.BarrierConfig()
    return IkConfig(
        lam=float(data.get("lambda", data.get("lam", 1e-3))),
        horizon=float(data.get("horizon", 0.01)),
        safety_margin=float(data.get("safety_margin", 0.01)),
        velocity_limit_scale=float(data.get("velocity_limit_scale", 1.0)),
        barrier=barrier,
        activation_tolerance=float(data.get("activation_tolerance", 1e-5)),
    )
