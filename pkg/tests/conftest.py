import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from graspctl.kinematics import (
    ChainModel,
    FixedFrame,
    Joint,
    RigidTransform,
    load_chain,
)


def _joint(name, parent, xyz, axis, group, lo=-3.0, hi=3.0, vel=2.0, rot=None):
    origin = RigidTransform(rot if rot is not None else np.eye(3), np.asarray(xyz, dtype=float))
    return Joint(name=name, parent=parent, origin=origin, axis=np.asarray(axis, dtype=float),
                 q_min=lo, q_max=hi, qd_min=-vel, qd_max=vel, group=group)


@pytest.fixture(scope="session")
def arm5f():
    return load_chain("arm5f")


@pytest.fixture(scope="session")
def arm2f():
    return load_chain("arm2f")


@pytest.fixture(scope="session")
def one_joint():
    return load_chain("one_joint")


@pytest.fixture(scope="session")
def straight_finger():
    """Palm fixed at the base; one finger of two 0.06 m links with parallel z-axis
    joints along x. Analytic planar case for the relative fingertip Jacobian."""
    return ChainModel(
        name="straight_finger",
        platform="custom",
        joints=(
            _joint("f_j1", "palm", [0.0, 0.0, 0.0], [0, 0, 1], "f"),
            _joint("f_j2", "f_j1", [0.06, 0.0, 0.0], [0, 0, 1], "f"),
        ),
        frames=(
            FixedFrame("palm", "base", RigidTransform.identity()),
            FixedFrame("f_tip", "f_j2", RigidTransform(np.eye(3), np.array([0.06, 0.0, 0.0]))),
        ),
        palm_frame="palm",
        fingers=("f",),
        fingertip_frames={"f": "f_tip"},
    )


@pytest.fixture(scope="session")
def planar_arm_finger():
    """One z-axis arm joint with the palm 0.5 m out along x, plus a two-joint
    finger branching at the palm; small enough to reason about by hand."""
    return ChainModel(
        name="planar_arm_finger",
        platform="custom",
        joints=(
            _joint("a1", "base", [0.0, 0.0, 0.0], [0, 0, 1], "arm"),
            _joint("f_j1", "palm", [0.0, 0.0, 0.0], [0, 0, 1], "f"),
            _joint("f_j2", "f_j1", [0.06, 0.0, 0.0], [0, 0, 1], "f"),
        ),
        frames=(
            FixedFrame("palm", "a1", RigidTransform(np.eye(3), np.array([0.5, 0.0, 0.0]))),
            FixedFrame("f_tip", "f_j2", RigidTransform(np.eye(3), np.array([0.06, 0.0, 0.0]))),
        ),
        palm_frame="palm",
        fingers=("f",),
        fingertip_frames={"f": "f_tip"},
    )


@pytest.fixture(scope="session")
def grasp5f_scenario():
    from graspctl.harness import load_scenario

    return load_scenario("grasp5f")
