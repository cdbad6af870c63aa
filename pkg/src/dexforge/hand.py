"""Planar serial-chain finger kinematics.

Fingers are chains of revolute joints in the XY plane. Everything here is
pure: forward kinematics, analytic Jacobians, static gravity compensation,
and a damped-least-squares IK used to seed scripted motions. Dynamic terms
(mass matrix, contact coupling) live in the simulator, not here.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Joint-vector length does not match the chain."""


@dataclass(frozen=True)
class FingerChain:
    """Geometry and static mass properties of one finger.

    link_lengths are meters per link, link_com_offsets are measured from the
    proximal joint along the link. base_pose is (x, y, angle) of the chain
    root in the world frame. The force/torque sensor sits at the proximal end
    of link `sensor_link_index` (default: the distal link).
    """

    link_lengths: tuple[float, ...]
    link_masses: tuple[float, ...]
    link_com_offsets: tuple[float, ...]
    joint_limits: tuple[tuple[float, float], ...]
    base_pose: tuple[float, float, float] = (0.0, 0.0, 0.0)
    sensor_link_index: int = -1
    link_radius: float = 0.008
    # lumped mass of the sensor + fingertip shell at the distal end
    tip_mass: float = 0.0
    # viscous joint damping, scalar or one value per joint
    joint_damping: float | tuple[float, ...] = 0.01
    # passive flexure springs (e.g. a sprung fingertip pad): torque
    # k * (rest - q) per joint, zero stiffness = plain revolute joint
    joint_stiffness: tuple[float, ...] | None = None
    joint_rest: tuple[float, ...] | None = None

    def __post_init__(self):
        n = len(self.link_lengths)
        if n < 1:
            raise ValueError("chain needs at least one link")
        if len(self.link_masses) != n or len(self.link_com_offsets) != n:
            raise ValueError("per-link fields must all have the same length")
        if len(self.joint_limits) != n:
            raise ValueError("need one joint limit pair per link")
        if any(l <= 0 for l in self.link_lengths):
            raise ValueError("link lengths must be strictly positive")
        if any(m < 0 for m in self.link_masses):
            raise ValueError("link masses must be non-negative")
        if self.tip_mass < 0:
            raise ValueError("tip_mass must be non-negative")
        if any(lo >= hi for lo, hi in self.joint_limits):
            raise ValueError("joint limits must satisfy lo < hi")
        idx = self.sensor_link_index
        if idx < 0:
            idx += n
        if not 0 <= idx < n:
            raise ValueError(f"sensor_link_index {self.sensor_link_index} out of range")
        object.__setattr__(self, "sensor_link_index", idx)
        stiffness = self.joint_stiffness if self.joint_stiffness is not None else (0.0,) * n
        rest = self.joint_rest if self.joint_rest is not None else (0.0,) * n
        if len(stiffness) != n or len(rest) != n:
            raise ValueError("joint_stiffness/joint_rest need one entry per joint")
        if any(k < 0 for k in stiffness):
            raise ValueError("joint_stiffness must be non-negative")
        object.__setattr__(self, "joint_stiffness", tuple(float(k) for k in stiffness))
        object.__setattr__(self, "joint_rest", tuple(float(r) for r in rest))
        damping = self.joint_damping
        if np.isscalar(damping):
            damping = (float(damping),) * n
        if len(damping) != n or any(d < 0 for d in damping):
            raise ValueError("joint_damping needs a non-negative value per joint")
        object.__setattr__(self, "joint_damping", tuple(float(d) for d in damping))

    @property
    def n_joints(self) -> int:
        return len(self.link_lengths)

    @property
    def reach(self) -> float:
        return float(sum(self.link_lengths))

    def check_q(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if q.shape != (self.n_joints,):
            raise DimensionError(
                f"expected {self.n_joints} joint angles, got shape {q.shape}"
            )
        return q

    def clamp_limits(self, q: np.ndarray) -> tuple[np.ndarray, bool]:
        """Clamp q into the joint limits; report whether anything moved."""
        lo = np.array([l for l, _ in self.joint_limits])
        hi = np.array([h for _, h in self.joint_limits])
        clamped = np.clip(q, lo, hi)
        return clamped, bool(np.any(clamped != q))

    def canonical_dict(self) -> dict:
        return {
            "lengths": list(self.link_lengths),
            "masses": list(self.link_masses),
            "com": list(self.link_com_offsets),
            "limits": [list(l) for l in self.joint_limits],
            "base": list(self.base_pose),
            "sensor_link": self.sensor_link_index,
            "link_radius": self.link_radius,
            "tip_mass": self.tip_mass,
            "stiffness": list(self.joint_stiffness),
            "rest": list(self.joint_rest),
        }


@dataclass
class JointState:
    """Joint angles and velocities of one finger."""

    q: np.ndarray
    qdot: np.ndarray

    @classmethod
    def rest(cls, chain: FingerChain, q0=None) -> "JointState":
        n = chain.n_joints
        q = np.zeros(n) if q0 is None else chain.check_q(q0)
        return cls(q=q.copy(), qdot=np.zeros(n))

    def copy(self) -> "JointState":
        return JointState(q=self.q.copy(), qdot=self.qdot.copy())


def hand_spec_hash(chains: list[FingerChain]) -> str:
    """Stable short hash of a hand description, stored in demo headers."""
    blob = json.dumps([c.canonical_dict() for c in chains], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def joint_positions(chain: FingerChain, q: np.ndarray) -> np.ndarray:
    """World positions of every joint origin plus the fingertip, shape (n+1, 2)."""
    q = chain.check_q(q)
    x, y = chain.base_pose[0], chain.base_pose[1]
    angle = chain.base_pose[2]
    pts = np.empty((chain.n_joints + 1, 2))
    pts[0, 0] = x
    pts[0, 1] = y
    for i, length in enumerate(chain.link_lengths):
        angle += q[i]
        x += length * math.cos(angle)
        y += length * math.sin(angle)
        pts[i + 1, 0] = x
        pts[i + 1, 1] = y
    return pts


def link_angles(chain: FingerChain, q: np.ndarray) -> np.ndarray:
    """Absolute world angle of each link."""
    q = chain.check_q(q)
    return chain.base_pose[2] + np.cumsum(q)


def forward_kinematics(chain: FingerChain, q: np.ndarray) -> np.ndarray:
    """Fingertip position (distal link tip) in the world frame."""
    return joint_positions(chain, q)[-1]


def _point_jacobian(joints: np.ndarray, point: np.ndarray, up_to_link: int) -> np.ndarray:
    """Jacobian of a point rigidly attached to link `up_to_link` (2 x n_joints).

    Columns for joints distal to the link are zero. joints is the (n+1, 2)
    array from joint_positions.
    """
    n = joints.shape[0] - 1
    J = np.zeros((2, n))
    px, py = point[0], point[1]
    for i in range(up_to_link + 1):
        J[0, i] = -(py - joints[i, 1])
        J[1, i] = px - joints[i, 0]
    return J


def jacobian(chain: FingerChain, q: np.ndarray) -> np.ndarray:
    """Analytic fingertip Jacobian, shape (2, n_joints)."""
    joints = joint_positions(chain, q)
    return _point_jacobian(joints, joints[-1], chain.n_joints - 1)


def link_com_positions(chain: FingerChain, q: np.ndarray) -> np.ndarray:
    """World position of each link center of mass, shape (n, 2)."""
    joints = joint_positions(chain, q)
    out = np.empty((chain.n_joints, 2))
    angle = chain.base_pose[2]
    for i in range(chain.n_joints):
        angle += q[i]
        off = chain.link_com_offsets[i]
        out[i, 0] = joints[i, 0] + off * math.cos(angle)
        out[i, 1] = joints[i, 1] + off * math.sin(angle)
    return out


def gravity_vector(chain: FingerChain, q: np.ndarray, gravity) -> np.ndarray:
    """Joint torques that statically cancel gravity on the chain and tip mass."""
    g = np.asarray(gravity, dtype=float)
    joints = joint_positions(chain, q)
    coms = link_com_positions(chain, q)
    tau = np.zeros(chain.n_joints)
    for i in range(chain.n_joints):
        Jc = _point_jacobian(joints, coms[i], i)
        tau -= Jc.T @ (chain.link_masses[i] * g)
    if chain.tip_mass > 0:
        Jt = _point_jacobian(joints, joints[-1], chain.n_joints - 1)
        tau -= Jt.T @ (chain.tip_mass * g)
    return tau


def mass_matrix(chain: FingerChain, q: np.ndarray, joints: np.ndarray | None = None) -> np.ndarray:
    """Joint-space inertia matrix; links are treated as slender rods."""
    if joints is None:
        joints = joint_positions(chain, q)
    n = chain.n_joints
    M = np.zeros((n, n))
    angle = chain.base_pose[2]
    for i in range(n):
        angle += q[i]
        m = chain.link_masses[i]
        cx = joints[i, 0] + chain.link_com_offsets[i] * math.cos(angle)
        cy = joints[i, 1] + chain.link_com_offsets[i] * math.sin(angle)
        inertia = m * chain.link_lengths[i] ** 2 / 12.0
        for a in range(i + 1):
            rax = -(cy - joints[a, 1])
            ray = cx - joints[a, 0]
            for b in range(a, i + 1):
                val = m * (rax * -(cy - joints[b, 1]) + ray * (cx - joints[b, 0])) + inertia
                M[a, b] += val
                if a != b:
                    M[b, a] += val
    if chain.tip_mass > 0:
        tx, ty = joints[n, 0], joints[n, 1]
        mt = chain.tip_mass
        for a in range(n):
            rax = -(ty - joints[a, 1])
            ray = tx - joints[a, 0]
            for b in range(a, n):
                val = mt * (rax * -(ty - joints[b, 1]) + ray * (tx - joints[b, 0]))
                M[a, b] += val
                if a != b:
                    M[b, a] += val
    return M


@dataclass
class IkResult:
    q: np.ndarray
    converged: bool
    iterations: int
    error: float


def solve_ik(
    chain: FingerChain,
    target,
    q_seed,
    damping: float = 1e-3,
    max_iters: int = 100,
    tol: float = 1e-4,
    max_step: float = 0.4,
) -> IkResult:
    """Damped-least-squares IK toward a fingertip target.

    Steps are norm-clamped to max_step radians so the solver cannot bounce
    across the workspace near singular configurations. Returns the best
    iterate with converged=False when the tolerance is not met (e.g.
    unreachable targets); never raises for unreachable targets.
    """
    target = np.asarray(target, dtype=float)
    q = chain.check_q(q_seed).copy()
    best_q = q.copy()
    best_err = float(np.linalg.norm(target - forward_kinematics(chain, q)))
    if best_err <= tol:
        return IkResult(q=best_q, converged=True, iterations=0, error=best_err)
    lam2 = damping * damping
    for it in range(1, max_iters + 1):
        e = target - forward_kinematics(chain, q)
        J = jacobian(chain, q)
        JJt = J @ J.T + lam2 * np.eye(2)
        dq = J.T @ np.linalg.solve(JJt, e)
        step = float(np.linalg.norm(dq))
        if step > max_step:
            dq *= max_step / step
        q = q + dq
        q, _ = chain.clamp_limits(q)
        err = float(np.linalg.norm(target - forward_kinematics(chain, q)))
        if err < best_err:
            best_err = err
            best_q = q.copy()
        if err <= tol:
            return IkResult(q=q.copy(), converged=True, iterations=it, error=err)
    return IkResult(q=best_q, converged=False, iterations=max_iters, error=best_err)
