"""Hierarchical grasp-control stack below a learned task-space policy.

Layers: serial-chain kinematics with palm-relative fingertip Jacobians, a batch
interior-point QP solver with a relaxed log barrier, a velocity-IK controller
with collision/limit constraints, a kinematic plant with PD torque law, grasp
reward/observation machinery, and post-training steerability tools.
"""

__version__ = "0.1.0"
