"""Post-training steerability tools: repulsive velocity-field modulation of the
palm command, joint-velocity-limit scaling, operational-space velocity-envelope
contours, and the tracking-error-vs-command-magnitude profiler."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .ikcontrol import CONSTRAINT_FAMILIES, ControlCommand, IkConfig
from .kinematics import ChainModel, Twist, evaluate


class SteerError(ValueError):
    pass


@dataclass(frozen=True)
class SphereObstacle:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        if self.radius <= 0.0:
            raise SteerError("obstacle radius must be positive")


@dataclass(frozen=True)
class ApfConfig:
    """Repulsive field: inside influence_radius of an obstacle surface, a radial
    outward velocity is added to the palm command. The magnitude follows an
    inverse-distance law that vanishes at the influence boundary and is hard
    capped at max_speed."""

    influence_radius: float = 0.10
    max_speed: float = 10.0
    gain: float = 0.05
    distance_floor: float = 1e-3
    obstacles: tuple[SphereObstacle, ...] = ()

    def __post_init__(self):
        if self.influence_radius <= 0.0 or self.max_speed <= 0.0:
            raise SteerError("influence_radius and max_speed must be positive")
        if self.gain < 0.0 or self.distance_floor <= 0.0:
            raise SteerError("gain must be nonnegative and distance_floor positive")


def apf_config_from_dict(data) -> ApfConfig:
    obstacles = tuple(
        SphereObstacle(np.asarray(o["center"], dtype=float), float(o["radius"]))
        for o in data.get("obstacles", [])
    )
    return ApfConfig(
        influence_radius=float(data.get("influence_radius", 0.10)),
        max_speed=float(data.get("max_speed", 10.0)),
        gain=float(data.get("gain", 0.05)),
        distance_floor=float(data.get("distance_floor", 1e-3)),
        obstacles=obstacles,
    )


def obstacle_separations(p_palm: np.ndarray, cfg: ApfConfig) -> np.ndarray:
    """Palm-center to obstacle-surface separation per obstacle."""
    p = np.asarray(p_palm, dtype=float)
    return np.array(
        [float(np.linalg.norm(p - ob.center)) - ob.radius for ob in cfg.obstacles]
    )


def apf_modulate(p_palm: np.ndarray, cmd: ControlCommand, cfg: ApfConfig) -> ControlCommand:
    """Superimpose the repulsive velocity onto the linear palm command; the angular
    part and fingertip velocities pass through unchanged."""
    p = np.asarray(p_palm, dtype=float)
    v_add = np.zeros(3)
    for ob in cfg.obstacles:
        diff = p - ob.center
        dist = float(np.linalg.norm(diff))
        s = dist - ob.radius
        if s > cfg.influence_radius:
            continue
        direction = diff / dist if dist > 1e-12 else np.array([0.0, 0.0, 1.0])
        speed = cfg.gain * (1.0 / max(s, cfg.distance_floor) - 1.0 / cfg.influence_radius)
        v_add += min(max(speed, 0.0), cfg.max_speed) * direction
    if not np.any(v_add):
        return cmd
    tw = cmd.palm_twist
    return ControlCommand(
        Twist(tw.angular, tw.linear + v_add, tw.frame),
        dict(cmd.fingertip_velocities),
    )


def scale_velocity_limits(cfg: IkConfig, factor: float) -> IkConfig:
    """Uniformly tighten the admissible joint-velocity box; factor in (0, 1]."""
    if not 0.0 < factor <= 1.0:
        raise SteerError(f"velocity limit scale factor {factor} out of (0, 1]")
    return replace(cfg, velocity_limit_scale=factor)


# ---------------------------------------------------------------------------
# operational-space velocity envelope (mean joint-velocity-limit contours)
# ---------------------------------------------------------------------------

PLANE_ROWS = {"xy": (3, 4), "yz": (4, 5), "zx": (5, 3)}


def contour_from_jacobians(
    jacobians: Sequence[np.ndarray],
    qd_max: np.ndarray,
    n_angles: int = 360,
) -> np.ndarray:
    """Mean velocity-limit contour from planar (2 x n) Jacobian samples.

    Per angle, the minimum-norm joint velocity moving along the unit direction is
    J^+ u; the achievable speed is limited by the bottleneck joint
    min_i qd_max_i / |dqd_i| (near-zero components are non-binding). Returns the
    (n_angles, 2) polyline of mean-speed points.
    """
    if n_angles < 8:
        raise SteerError("n_angles must be at least 8")
    if not jacobians:
        raise SteerError("at least one configuration sample is required")
    qd_max = np.asarray(qd_max, dtype=float).reshape(-1)
    if np.any(qd_max <= 0.0):
        raise SteerError("qd_max entries must be positive")

    theta = 2.0 * np.pi * np.arange(n_angles) / n_angles
    u = np.stack([np.cos(theta), np.sin(theta)], axis=1)

    alphas = []
    for idx, jac in enumerate(jacobians):
        jac = np.asarray(jac, dtype=float)
        if jac.shape != (2, qd_max.shape[0]):
            raise SteerError(f"sample {idx}: expected 2x{qd_max.shape[0]} Jacobian, got {jac.shape}")
        if np.max(np.abs(jac)) < 1e-12:
            warnings.warn(f"skipping sample {idx}: plane Jacobian is identically zero")
            continue
        dqd = u @ np.linalg.pinv(jac).T  # (n_angles, n)
        mag = np.abs(dqd)
        binding = mag >= 1e-12
        ratios = np.where(binding, qd_max[None, :] / np.maximum(mag, 1e-300), np.inf)
        alpha = np.min(ratios, axis=1)
        alpha[~binding.any(axis=1)] = 0.0  # direction unreachable: no joint moves it
        alphas.append(alpha)
    if not alphas:
        raise SteerError("all configuration samples had zero plane Jacobians")
    mean_alpha = np.mean(alphas, axis=0)
    return mean_alpha[:, None] * u


def velocity_limit_contour(
    model: ChainModel,
    q_samples: Sequence[np.ndarray],
    plane: str = "xy",
    qd_max: np.ndarray | None = None,
    n_angles: int = 360,
) -> np.ndarray:
    """Envelope of palm linear velocities in a Cartesian plane implied by joint
    velocity limits, averaged over sampled configurations."""
    if plane not in PLANE_ROWS:
        raise SteerError(f"plane must be one of {sorted(PLANE_ROWS)}")
    if qd_max is None:
        qd_max = model.velocity_limits[1]
    rows = PLANE_ROWS[plane]
    jacobians = []
    for q in q_samples:
        jac = evaluate(model, q).frame_jacobian(model.palm_frame)
        jacobians.append(jac[list(rows), :])
    return contour_from_jacobians(jacobians, qd_max, n_angles)


def sample_configurations(model: ChainModel, count: int, rng: np.random.Generator) -> list[np.ndarray]:
    q_min, q_max = model.position_limits
    return [rng.uniform(q_min, q_max) for _ in range(count)]


# ---------------------------------------------------------------------------
# tracking-error-vs-command-magnitude profiling
# ---------------------------------------------------------------------------

@dataclass
class TrackingProfile:
    """Histogram over command magnitude: per-bin mean task-space tracking error
    plus activation/violation step counts per constraint family."""

    bin_edges: np.ndarray
    counts: np.ndarray
    mean_error: np.ndarray
    activations: dict[str, np.ndarray]
    violations: dict[str, np.ndarray]

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    def to_rows(self) -> list[list]:
        header = ["bin_low", "bin_high", "count", "mean_tracking_error"]
        header += [f"active_{f}" for f in CONSTRAINT_FAMILIES]
        header += [f"violation_{f}" for f in CONSTRAINT_FAMILIES]
        rows: list[list] = [header]
        for i in range(self.counts.shape[0]):
            row = [
                float(self.bin_edges[i]),
                float(self.bin_edges[i + 1]),
                int(self.counts[i]),
                float(self.mean_error[i]) if np.isfinite(self.mean_error[i]) else "",
            ]
            row += [int(self.activations[f][i]) for f in CONSTRAINT_FAMILIES]
            row += [int(self.violations[f][i]) for f in CONSTRAINT_FAMILIES]
            rows.append(row)
        return rows


def tracking_error_profile(
    steps: Iterable,
    n_bins: int = 10,
    violation_tolerance: float = 1e-4,
) -> TrackingProfile:
    """Bin controller steps by commanded palm-twist magnitude.

    `steps` provides command_norm, tracking_error, active_counts, and slack_min
    (the controller diagnostics records do). Raises on empty input.
    """
    steps = list(steps)
    if not steps:
        raise SteerError("no controller steps to profile")
    norms = np.array([s.command_norm for s in steps], dtype=float)
    errors = np.array([s.tracking_error for s in steps], dtype=float)
    top = float(norms.max())
    edges = np.linspace(0.0, top if top > 0.0 else 1.0, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, norms, side="right") - 1, 0, n_bins - 1)

    counts = np.zeros(n_bins, dtype=int)
    err_sum = np.zeros(n_bins)
    activations = {f: np.zeros(n_bins, dtype=int) for f in CONSTRAINT_FAMILIES}
    violations = {f: np.zeros(n_bins, dtype=int) for f in CONSTRAINT_FAMILIES}
    for i, step in zip(idx, steps):
        counts[i] += 1
        err_sum[i] += step.tracking_error
        for fam in CONSTRAINT_FAMILIES:
            if step.active_counts.get(fam, 0) > 0:
                activations[fam][i] += 1
            if step.slack_min.get(fam, np.inf) < -violation_tolerance:
                violations[fam][i] += 1
    with np.errstate(invalid="ignore"):
        mean_error = np.where(counts > 0, err_sum / np.maximum(counts, 1), np.nan)
    return TrackingProfile(
        bin_edges=edges,
        counts=counts,
        mean_error=mean_error,
        activations=activations,
        violations=violations,
    )
