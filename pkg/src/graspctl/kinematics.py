"""Serial-chain rigid-body kinematics: forward kinematics, world-frame spatial
Jacobians, and palm-relative fingertip Jacobians.

Twist/Jacobian row ordering is [angular; linear] everywhere. The linear part is
the velocity of the frame origin expressed in world coordinates (geometric
Jacobian), so for a revolute joint i the column toward frame f is
[z_i; z_i x (p_f - p_i)].
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .rotations import (
    orthonormality_drift,
    quat_from_matrix,
    reorthonormalize,
    rpy_matrix,
    skew,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

BASE_FRAME = "base"

PLATFORM_LAYOUT = {
    "2f": {"n_arm": 7, "n_total": 15, "fingers": ("left", "right")},
    "5f": {"n_arm": 7, "n_total": 27, "fingers": ("thumb", "index", "middle", "ring", "little")},
}
JOINTS_PER_FINGER = 4


class KinematicsError(ValueError):
    """Raised for malformed chain descriptions or invalid kinematic queries."""


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) pose: orthonormal rotation matrix + translation in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=float).reshape(3)
        if orthonormality_drift(rot) > 1e-8 or np.linalg.det(rot) < 0.0:
            raise KinematicsError("rotation matrix is not orthonormal with det +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        rot = self.rotation @ other.rotation
        # drift is policed here so arbitrary composition chains stay orthonormal
        if orthonormality_drift(rot) > 1e-9:
            rot = reorthonormalize(rot)
        return RigidTransform(rot, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def apply(self, point: np.ndarray) -> np.ndarray:
        return self.rotation @ np.asarray(point, dtype=float) + self.translation

    def quaternion(self) -> np.ndarray:
        return quat_from_matrix(self.rotation)


@dataclass(frozen=True)
class Twist:
    """6D velocity [angular; linear] with an explicit frame tag."""

    angular: np.ndarray
    linear: np.ndarray
    frame: str = "world"

    def __post_init__(self):
        object.__setattr__(self, "angular", np.asarray(self.angular, dtype=float).reshape(3))
        object.__setattr__(self, "linear", np.asarray(self.linear, dtype=float).reshape(3))

    @staticmethod
    def zero(frame: str = "world") -> "Twist":
        return Twist(np.zeros(3), np.zeros(3), frame)

    @staticmethod
    def from_vector(vec: np.ndarray, frame: str = "world") -> "Twist":
        vec = np.asarray(vec, dtype=float).reshape(6)
        return Twist(vec[:3], vec[3:], frame)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.angular, self.linear])


@dataclass(frozen=True)
class Joint:
    """Revolute joint placed by a fixed origin transform in its parent frame."""

    name: str
    parent: str
    origin: RigidTransform
    axis: np.ndarray
    q_min: float
    q_max: float
    qd_min: float
    qd_max: float
    group: str  # "arm" or a finger name

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float).reshape(3)
        norm = np.linalg.norm(axis)
        if norm < 1e-9:
            raise KinematicsError(f"joint {self.name}: zero axis")
        object.__setattr__(self, "axis", axis / norm)
        if not self.q_min < self.q_max:
            raise KinematicsError(f"joint {self.name}: empty position range")
        if not (self.qd_min < 0.0 < self.qd_max):
            raise KinematicsError(f"joint {self.name}: velocity range must straddle zero")


@dataclass(frozen=True)
class FixedFrame:
    name: str
    parent: str
    origin: RigidTransform


@dataclass
class JointState:
    positions: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1)
        self.velocities = np.asarray(self.velocities, dtype=float).reshape(-1)
        if self.positions.shape != self.velocities.shape:
            raise KinematicsError("joint position/velocity length mismatch")

    def copy(self) -> "JointState":
        return JointState(self.positions.copy(), self.velocities.copy())


@dataclass(frozen=True)
class ChainModel:
    """Immutable arm+fingers chain. Arm joints occupy the first n_arm indices and
    every finger branches from the palm frame (enforced at load)."""

    name: str
    platform: str
    joints: tuple[Joint, ...]
    frames: tuple[FixedFrame, ...]
    palm_frame: str
    fingers: tuple[str, ...]
    fingertip_frames: Mapping[str, str]
    base_pose: RigidTransform = field(default_factory=RigidTransform.identity)

    # derived (filled in __post_init__)
    n: int = field(init=False, default=0)
    n_arm: int = field(init=False, default=0)

    def __post_init__(self):
        names = [j.name for j in self.joints]
        if len(set(names)) != len(names):
            raise KinematicsError("duplicate joint names")
        frame_names = [f.name for f in self.frames]
        if len(set(frame_names + names + [BASE_FRAME])) != len(frame_names) + len(names) + 1:
            raise KinematicsError("frame names collide with joint names or 'base'")

        joint_index = {j.name: i for i, j in enumerate(self.joints)}
        fixed = {f.name: f for f in self.frames}

        # flatten every fixed-frame chain to (anchor joint index, fixed transform);
        # anchor -1 means the base
        anchors: dict[str, tuple[int, RigidTransform]] = {BASE_FRAME: (-1, RigidTransform.identity())}

        def resolve(frame: str) -> tuple[int, RigidTransform]:
            if frame in anchors:
                return anchors[frame]
            if frame in joint_index:
                anchors[frame] = (joint_index[frame], RigidTransform.identity())
            elif frame in fixed:
                f = fixed[frame]
                a, t = resolve(f.parent)
                anchors[frame] = (a, t.compose(f.origin))
            else:
                raise KinematicsError(f"unknown parent frame '{frame}'")
            return anchors[frame]

        joint_anchor = []
        joint_fixed = []
        for i, j in enumerate(self.joints):
            a, t = resolve(j.parent)
            if a >= i:
                raise KinematicsError(f"joint {j.name}: parent is not upstream (topological order)")
            joint_anchor.append(a)
            joint_fixed.append(t.compose(j.origin))
        for f in self.frames:
            resolve(f.name)

        # ancestor joint paths
        joint_paths: list[np.ndarray] = []
        for i in range(len(self.joints)):
            a = joint_anchor[i]
            prefix = joint_paths[a] if a >= 0 else np.empty(0, dtype=int)
            joint_paths.append(np.append(prefix, i))

        def frame_path(frame: str) -> np.ndarray:
            a, _ = resolve(frame)
            return joint_paths[a] if a >= 0 else np.empty(0, dtype=int)

        self._validate_layout(joint_index, frame_path)

        object.__setattr__(self, "n", len(self.joints))
        object.__setattr__(self, "n_arm", sum(1 for j in self.joints if j.group == "arm"))
        object.__setattr__(self, "_joint_index", joint_index)
        object.__setattr__(self, "_anchors", anchors)
        object.__setattr__(self, "_joint_anchor", tuple(joint_anchor))
        object.__setattr__(self, "_joint_fixed", tuple(joint_fixed))
        object.__setattr__(self, "_joint_paths", tuple(joint_paths))
        # stacked per-joint arrays for the forward-kinematics hot loop
        n = len(self.joints)
        r_fix = np.stack([t.rotation for t in joint_fixed]) if n else np.zeros((0, 3, 3))
        p_fix = np.stack([t.translation for t in joint_fixed]) if n else np.zeros((0, 3))
        axes = np.stack([j.axis for j in self.joints]) if n else np.zeros((0, 3))
        skews = np.stack([skew(a) for a in axes]) if n else np.zeros((0, 3, 3))
        object.__setattr__(self, "_r_fix", r_fix)
        object.__setattr__(self, "_p_fix", p_fix)
        object.__setattr__(self, "_axis_fixed", np.einsum("nij,nj->ni", r_fix, axes))
        object.__setattr__(self, "_axis_skew", skews)
        object.__setattr__(self, "_axis_skew2", skews @ skews)
        object.__setattr__(
            self,
            "_frame_paths",
            {name: frame_path(name) for name in list(anchors)},
        )
        object.__setattr__(self, "_position_limits", self._stack_limits())

    def _validate_layout(self, joint_index, frame_path_fn):
        if self.palm_frame not in {f.name for f in self.frames} and self.palm_frame not in joint_index:
            raise KinematicsError(f"palm frame '{self.palm_frame}' not defined")
        for finger in self.fingers:
            if finger not in self.fingertip_frames:
                raise KinematicsError(f"finger '{finger}' has no fingertip frame")

        arm = [j for j in self.joints if j.group == "arm"]
        if any(j.group == "arm" and i >= len(arm) for i, j in enumerate(self.joints)):
            raise KinematicsError("arm joints must occupy the first indices")

        # the relative-Jacobian zero-column property needs every finger chain to
        # branch exactly at the palm frame
        palm_path = set(frame_path_fn(self.palm_frame).tolist())
        if {i for i, j in enumerate(self.joints) if j.group == "arm"} != palm_path:
            raise KinematicsError("palm path joints must be exactly the arm group")
        fixed_parent = {f.name: f.parent for f in self.frames}
        joint_names = {j.name for j in self.joints}

        def attaches_to_palm(frame: str) -> bool:
            while True:
                if frame == self.palm_frame:
                    return True
                if frame == BASE_FRAME and self.palm_frame == BASE_FRAME:
                    return True
                if frame in joint_names or frame == BASE_FRAME:
                    return False
                frame = fixed_parent[frame]

        for finger in self.fingers:
            chain = [i for i, j in enumerate(self.joints) if j.group == finger]
            if not chain:
                raise KinematicsError(f"finger '{finger}' has no joints")
            first = self.joints[chain[0]]
            if not attaches_to_palm(first.parent):
                raise KinematicsError(
                    f"finger '{finger}' must branch from the palm frame, got parent '{first.parent}'"
                )
            tip_path = set(frame_path_fn(self.fingertip_frames[finger]).tolist())
            if tip_path != palm_path | set(chain):
                raise KinematicsError(f"finger '{finger}' tip path must be arm + own joints")

        if self.platform in PLATFORM_LAYOUT:
            layout = PLATFORM_LAYOUT[self.platform]
            if tuple(self.fingers) != layout["fingers"]:
                raise KinematicsError(
                    f"platform '{self.platform}' requires fingers {layout['fingers']}"
                )
            if len(arm) != layout["n_arm"] or len(self.joints) != layout["n_total"]:
                raise KinematicsError(
                    f"platform '{self.platform}' requires {layout['n_arm']}+"
                    f"{layout['n_total'] - layout['n_arm']} joints, "
                    f"got {len(arm)}+{len(self.joints) - len(arm)}"
                )
            for finger in self.fingers:
                k = sum(1 for j in self.joints if j.group == finger)
                if k != JOINTS_PER_FINGER:
                    raise KinematicsError(f"finger '{finger}' must have {JOINTS_PER_FINGER} joints")
        elif self.platform != "custom":
            raise KinematicsError(f"unknown platform tag '{self.platform}'")

    def _stack_limits(self):
        q_min = np.array([j.q_min for j in self.joints])
        q_max = np.array([j.q_max for j in self.joints])
        qd_min = np.array([j.qd_min for j in self.joints])
        qd_max = np.array([j.qd_max for j in self.joints])
        return q_min, q_max, qd_min, qd_max

    # -- limit accessors -------------------------------------------------
    @property
    def position_limits(self) -> tuple[np.ndarray, np.ndarray]:
        return self._position_limits[0], self._position_limits[1]

    @property
    def velocity_limits(self) -> tuple[np.ndarray, np.ndarray]:
        return self._position_limits[2], self._position_limits[3]

    @property
    def hand_slice(self) -> slice:
        return slice(self.n_arm, self.n)

    def joint_names(self) -> list[str]:
        return [j.name for j in self.joints]

    def has_frame(self, frame: str) -> bool:
        return frame in self._anchors

    def check_q(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float).reshape(-1)
        if q.shape[0] != self.n:
            raise KinematicsError(f"expected {self.n} joint positions, got {q.shape[0]}")
        return q

    def mid_configuration(self) -> np.ndarray:
        q_min, q_max = self.position_limits
        return 0.5 * (q_min + q_max)

    def with_base_pose(self, pose: RigidTransform) -> "ChainModel":
        return replace(self, base_pose=pose)


class KinematicsEval:
    """World-frame kinematics of one configuration: joint axes/origins plus pose
    and Jacobian queries for any named frame. Built once per control step; frame
    poses and Jacobians are memoized (returned arrays must not be mutated)."""

    def __init__(self, model: ChainModel, q: np.ndarray):
        q = model.check_q(q)
        self.model = model
        self.q = q
        n = model.n
        rot = np.empty((n, 3, 3))
        pos = np.empty((n, 3))
        axes = np.empty((n, 3))
        # batched local joint rotations: R_fix @ (I + sin(q) K + (1 - cos(q)) K^2)
        s = np.sin(q)
        c = np.cos(q)
        r_step = model._r_fix @ (
            np.eye(3)[None]
            + s[:, None, None] * model._axis_skew
            + (1.0 - c)[:, None, None] * model._axis_skew2
        )
        base_r = model.base_pose.rotation
        base_p = model.base_pose.translation
        anchor = model._joint_anchor
        p_fix = model._p_fix
        axis_fixed = model._axis_fixed
        for i in range(n):
            a = anchor[i]
            if a < 0:
                r_par, p_par = base_r, base_p
            else:
                r_par, p_par = rot[a], pos[a]
            pos[i] = r_par @ p_fix[i] + p_par
            axes[i] = r_par @ axis_fixed[i]
            rot[i] = r_par @ r_step[i]
        self._rot = rot
        self._pos = pos
        self._axes = axes
        self._pose_cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._jac_cache: dict[str, np.ndarray] = {}

    def _anchor_pose(self, anchor: int) -> tuple[np.ndarray, np.ndarray]:
        if anchor < 0:
            return self.model.base_pose.rotation, self.model.base_pose.translation
        return self._rot[anchor], self._pos[anchor]

    def _frame_rp(self, frame: str) -> tuple[np.ndarray, np.ndarray]:
        cached = self._pose_cache.get(frame)
        if cached is not None:
            return cached
        try:
            anchor, fixed = self.model._anchors[frame]
        except KeyError:
            raise KinematicsError(f"unknown frame '{frame}'") from None
        r, p = self._anchor_pose(anchor)
        rp = (r @ fixed.rotation, r @ fixed.translation + p)
        self._pose_cache[frame] = rp
        return rp

    def frame_pose(self, frame: str) -> RigidTransform:
        r, p = self._frame_rp(frame)
        return RigidTransform(r, p)

    def frame_point(self, frame: str, offset: np.ndarray | None = None) -> np.ndarray:
        r, p = self._frame_rp(frame)
        if offset is None:
            return p
        return r @ np.asarray(offset, dtype=float) + p

    def frame_jacobian(self, frame: str) -> np.ndarray:
        """6 x n world-frame geometric Jacobian ([angular; linear]) of the frame origin."""
        jac = self._jac_cache.get(frame)
        if jac is None:
            jac = self._jacobian_at_point(frame, self._frame_rp(frame)[1])
            self._jac_cache[frame] = jac
        return jac

    def point_jacobian(self, frame: str, offset: np.ndarray | None = None) -> np.ndarray:
        """3 x n positional Jacobian of a point rigidly attached to a frame."""
        return self._jacobian_at_point(frame, self.frame_point(frame, offset))[3:]

    def _jacobian_at_point(self, frame: str, point: np.ndarray) -> np.ndarray:
        if frame not in self.model._frame_paths:
            raise KinematicsError(f"unknown frame '{frame}'")
        path = self.model._frame_paths[frame]
        jac = np.zeros((6, self.model.n))
        if path.size:
            z = self._axes[path]
            d = point - self._pos[path]
            jac[:3, path] = z.T
            # manual cross product z x d (vectorized np.cross is slower here)
            jac[3, path] = z[:, 1] * d[:, 2] - z[:, 2] * d[:, 1]
            jac[4, path] = z[:, 2] * d[:, 0] - z[:, 0] * d[:, 2]
            jac[5, path] = z[:, 0] * d[:, 1] - z[:, 1] * d[:, 0]
        return jac


def evaluate(model: ChainModel, q: np.ndarray) -> KinematicsEval:
    return KinematicsEval(model, q)


# ---------------------------------------------------------------------------
# spec operations
# ---------------------------------------------------------------------------

def forward_kinematics(model: ChainModel, q: np.ndarray, frame: str) -> RigidTransform:
    """World-frame pose of a named frame."""
    return evaluate(model, q).frame_pose(frame)


def palm_jacobian_world(model: ChainModel, q: np.ndarray) -> np.ndarray:
    """6 x n base-to-palm spatial Jacobian; finger-joint columns are zero."""
    return evaluate(model, q).frame_jacobian(model.palm_frame)


def fingertip_jacobian_relative(
    model: ChainModel, q: np.ndarray, finger: str, kin: KinematicsEval | None = None
) -> np.ndarray:
    """6 x n fingertip Jacobian relative to the palm, expressed in the palm frame.

    Computed as blkdiag(R^T, R^T) @ (J_F - [[I, 0], [-[p_F/P]x, I]] @ J_P) with R the
    palm world rotation and p_F/P the palm-to-fingertip offset in world coordinates.
    The subtraction cancels the arm's contribution exactly, so arm columns are
    identically zero (asserted in tests to 1e-12).
    """
    if finger not in model.fingertip_frames:
        raise KinematicsError(f"unknown finger '{finger}'")
    k = kin if kin is not None else evaluate(model, q)
    cache_key = f"__relative__:{finger}"
    cached = k._jac_cache.get(cache_key)
    if cached is not None:
        return cached
    tip = model.fingertip_frames[finger]
    palm_r, palm_p = k._frame_rp(model.palm_frame)
    j_tip = k.frame_jacobian(tip)
    j_palm = k.frame_jacobian(model.palm_frame)
    p_rel = k._frame_rp(tip)[1] - palm_p
    shifted = j_tip.copy()
    shifted[:3] -= j_palm[:3]
    shifted[3:] -= -skew(p_rel) @ j_palm[:3] + j_palm[3:]
    rt = palm_r.T
    out = np.empty_like(shifted)
    out[:3] = rt @ shifted[:3]
    out[3:] = rt @ shifted[3:]
    k._jac_cache[cache_key] = out
    return out


def fingertip_jacobian_linear(
    model: ChainModel, q: np.ndarray, finger: str, kin: KinematicsEval | None = None
) -> np.ndarray:
    """3 x n translational block of the palm-relative fingertip Jacobian."""
    return fingertip_jacobian_relative(model, q, finger, kin)[3:]


# ---------------------------------------------------------------------------
# chain description files
# ---------------------------------------------------------------------------

def _transform_from_table(table: Mapping, prefix: str = "origin") -> RigidTransform:
    xyz = np.asarray(table.get(f"{prefix}_xyz", [0.0, 0.0, 0.0]), dtype=float)
    rpy = table.get(f"{prefix}_rpy", [0.0, 0.0, 0.0])
    return RigidTransform(rpy_matrix(*[float(v) for v in rpy]), xyz)


def parse_chain(data: Mapping, name: str = "chain") -> ChainModel:
    """Build a ChainModel from a parsed key/value tree (see data/chains/*.toml)."""
    try:
        platform = data["platform"]
        joints_raw = data["joints"]
    except KeyError as exc:
        raise KinematicsError(f"chain file missing required key {exc}") from None

    joints = []
    for jt in joints_raw:
        if "vel_limits" in jt:
            qd_min, qd_max = (float(v) for v in jt["vel_limits"])
        else:
            v = float(jt.get("vel_limit", 1.0))
            qd_min, qd_max = -v, v
        lo, hi = (float(v) for v in jt["pos_limits"])
        joints.append(
            Joint(
                name=jt["name"],
                parent=jt["parent"],
                origin=_transform_from_table(jt),
                axis=np.asarray(jt["axis"], dtype=float),
                q_min=lo,
                q_max=hi,
                qd_min=qd_min,
                qd_max=qd_max,
                group=jt.get("group", "arm"),
            )
        )

    frames = tuple(
        FixedFrame(ft["name"], ft["parent"], _transform_from_table(ft))
        for ft in data.get("frames", [])
    )
    fingers_raw = data.get("fingers", [])
    fingers = tuple(f["name"] for f in fingers_raw)
    tips = {f["name"]: f["tip_frame"] for f in fingers_raw}

    base_pose = RigidTransform.identity()
    if "base" in data:
        base_pose = _transform_from_table(data["base"])

    return ChainModel(
        name=data.get("name", name),
        platform=platform,
        joints=tuple(joints),
        frames=frames,
        palm_frame=data.get("palm_frame", "palm"),
        fingers=fingers,
        fingertip_frames=tips,
        base_pose=base_pose,
    )


def builtin_chain_path(name: str) -> Path:
    return Path(__file__).parent / "data" / "chains" / f"{name}.toml"


def load_chain(source: str | Path) -> ChainModel:
    """Load a chain description. `source` is a builtin name (e.g. 'arm5f') or a path."""
    path = Path(source)
    if not path.suffix:
        candidate = builtin_chain_path(str(source))
        if candidate.exists():
            path = candidate
    if not path.exists():
        raise KinematicsError(f"chain description not found: {source}")
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return parse_chain(data, name=path.stem)


def finite_difference_jacobian(
    fn, q: np.ndarray, eps: float = 1e-6
) -> np.ndarray:
    """Central-difference Jacobian of a vector-valued fn(q); oracle for tests."""
    q = np.asarray(q, dtype=float)
    f0 = np.asarray(fn(q))
    jac = np.zeros((f0.shape[0], q.shape[0]))
    for j in range(q.shape[0]):
        dq = np.zeros_like(q)
        dq[j] = eps
        jac[:, j] = (np.asarray(fn(q + dq)) - np.asarray(fn(q - dq))) / (2.0 * eps)
    return jac
