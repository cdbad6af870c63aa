"""Cartesian impedance control for fingertips.

A fingertip control force F = kp*(x_d - x_c) - kv*xdot_c is mapped to joint
torques through the transposed Jacobian with exact gravity compensation.
Torques are recomputed at the control rate and held over the physics
substeps in between (zero-order hold).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hand import forward_kinematics, gravity_vector, jacobian
from .sim import SUBSTEPS_PER_TICK, Scene, Wrench, run_substeps

DEFAULT_KP = 220.0
# Effective fingertip mass used by the damping heuristic. Sized for the
# default chains so the 30 Hz torque hold stays well inside its stability
# region (light tips go unstable under sampled damping at this rate).
DEFAULT_TIP_MASS = 0.4
DEFAULT_ZETA = 0.75
# Sampled damping destabilizes once kv*T/m_eff gets near 2; cap kv so high
# kp settings stay inside the 30 Hz hold's stability region.
KV_SAMPLING_CAP = 14.0


def critical_kv(kp: float, tip_mass: float = DEFAULT_TIP_MASS, zeta: float = DEFAULT_ZETA) -> float:
    return min(2.0 * zeta * float(np.sqrt(kp * tip_mass)), KV_SAMPLING_CAP)


@dataclass(frozen=True)
class ImpedanceGains:
    kp: float = DEFAULT_KP
    kv: float | None = None  # damping heuristic when omitted

    def __post_init__(self):
        if self.kp <= 0:
            raise ValueError("kp must be positive")
        kv = self.kv if self.kv is not None else critical_kv(self.kp)
        if kv < 0:
            raise ValueError("kv must be non-negative")
        object.__setattr__(self, "kv", float(kv))


def control_force(gains: ImpedanceGains, x_d, x_c, xdot_c) -> np.ndarray:
    """F = kp*(x_d - x_c) - kv*xdot_c, elementwise on the workspace axes."""
    x_d = np.asarray(x_d, dtype=float)
    x_c = np.asarray(x_c, dtype=float)
    xdot_c = np.asarray(xdot_c, dtype=float)
    if not (x_d.shape == x_c.shape == xdot_c.shape):
        raise ValueError("position/velocity dimensions do not match")
    return gains.kp * (x_d - x_c) - gains.kv * xdot_c


def joint_torques(J: np.ndarray, F, g) -> np.ndarray:
    """tau = J^T F + g."""
    J = np.asarray(J, dtype=float)
    F = np.asarray(F, dtype=float)
    g = np.asarray(g, dtype=float)
    if J.shape[0] != F.shape[0] or J.shape[1] != g.shape[0]:
        raise ValueError(f"shape mismatch: J {J.shape}, F {F.shape}, g {g.shape}")
    return J.T @ F + g


def finger_command(scene: Scene, finger_index: int, target, gains: ImpedanceGains) -> np.ndarray:
    """Impedance torque command for one finger toward a fingertip target.

    When the scene's actuators already compensate gravity the g term is zero;
    otherwise it is the static compensation torque.
    """
    finger = scene.fingers[finger_index]
    q, qdot = finger.state.q, finger.state.qdot
    x_c = forward_kinematics(finger.chain, q)
    J = jacobian(finger.chain, q)
    F = control_force(gains, target, x_c, J @ qdot)
    if scene.finger_gravity_comp:
        g = np.zeros(finger.chain.n_joints)
    else:
        g = gravity_vector(finger.chain, q, scene.gravity)
    return joint_torques(J, F, g)


def hold_commands(scene: Scene, gains: ImpedanceGains) -> list[np.ndarray]:
    """Commands that hold every fingertip at its current position."""
    return [finger_command(scene, i, scene.fingertip(i), gains) for i in range(len(scene.fingers))]


@dataclass
class TrackPoint:
    scene: Scene
    wrenches: list[Wrench]
    targets: list[np.ndarray]


def control_tick(
    scene: Scene,
    targets: dict[int, np.ndarray],
    gains: ImpedanceGains,
    substeps: int = SUBSTEPS_PER_TICK,
) -> tuple[Scene, list[Wrench]]:
    """One control tick: compute per-finger torques, hold them over substeps.

    Fingers without an entry in `targets` hold their current tip position.
    """
    torques = []
    for i in range(len(scene.fingers)):
        tgt = targets.get(i)
        if tgt is None:
            tgt = scene.fingertip(i)
        torques.append(finger_command(scene, i, tgt, gains))
    return run_substeps(scene, torques, n=substeps)


def track_trajectory(
    scene: Scene,
    finger_indices: list[int],
    targets: np.ndarray,
    gains: ImpedanceGains,
    control_rate: float = 30.0,
) -> list[TrackPoint]:
    """Track per-finger target sequences under impedance control.

    targets has shape (T, n_controlled, 2); sample k is held from tick k to
    k+1 (zero-order hold). The returned trace has one entry per tick with the
    pre-step scene state, its sensed wrenches, and the targets applied at
    that tick, so entry k describes time k/control_rate.
    """
    targets = np.asarray(targets, dtype=float)
    if targets.ndim != 3 or targets.shape[1] != len(finger_indices) or targets.shape[2] != 2:
        raise ValueError(f"bad target array shape {targets.shape}")
    substep_rate = 1.0 / scene.dt
    per_tick = substep_rate / control_rate
    if abs(per_tick - round(per_tick)) > 1e-9:
        raise ValueError(f"control rate {control_rate} must divide the physics rate {substep_rate}")
    per_tick = int(round(per_tick))

    trace = []
    current = scene
    for k in range(targets.shape[0]):
        tick_targets = {fi: targets[k, j] for j, fi in enumerate(finger_indices)}
        before = current
        current, wrenches = control_tick(current, tick_targets, gains, substeps=per_tick)
        trace.append(
            TrackPoint(scene=before, wrenches=wrenches, targets=[targets[k, j].copy() for j in range(len(finger_indices))])
        )
    return trace
