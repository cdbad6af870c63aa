"""Scripted kinesthetic operators.

Each driver is a small closed-loop state machine standing in for the human:
it watches the live scene and sensed wrenches at the recording rate and
moves per-finger handle targets with bounded speed. Seeded jitter on
waypoints and setpoints gives a dataset of demos natural variation.
"""

from __future__ import annotations

import numpy as np

from .sim import Scene, grip_point
from .tasks import TaskSpec

DRIVER_SEED_SALT = 0x5EED


def driver_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([DRIVER_SEED_SALT, seed]))


class ScriptedDriver:
    """Base class: persistent handle positions, rate-limited tip servoing."""

    def __init__(self, task: TaskSpec, seed: int):
        self.task = task
        self.seed = seed
        self.rng = driver_rng(seed)
        self.handles: dict[int, np.ndarray] = {}
        self._done = False

    def start(self, scene: Scene) -> None:
        self.handles = {i: grip_point(scene, i).copy() for i in range(len(scene.fingers))}

    def finished(self, tick: int, scene: Scene) -> bool:
        return self._done

    def step(self, tick: int, scene: Scene, wrenches) -> dict[int, np.ndarray]:
        raise NotImplementedError

    # movement helpers ------------------------------------------------------

    # a human can only stretch the grip spring so far; clamping the handle
    # near the grip point doubles as servo anti-windup when motion stalls
    MAX_HANDLE_LEAD = 0.012

    def _clamp_lead(self, scene, i):
        lead = self.handles[i] - grip_point(scene, i)
        norm = float(np.linalg.norm(lead))
        if norm > self.MAX_HANDLE_LEAD:
            self.handles[i] = grip_point(scene, i) + lead * (self.MAX_HANDLE_LEAD / norm)

    def servo_tip(self, scene, i, tip_goal, gain=0.3, rate=0.0025):
        """Nudge finger i's handle so its tip walks toward tip_goal."""
        tip = scene.fingertip(i)
        delta = np.clip(gain * (np.asarray(tip_goal) - tip), -rate, rate)
        self.handles[i] = self.handles[i] + delta
        self._clamp_lead(scene, i)
        return self.handles[i]

    def move_handle(self, i, delta, rate=0.0025, scene=None):
        delta = np.clip(np.asarray(delta, dtype=float), -rate, rate)
        self.handles[i] = self.handles[i] + delta
        if scene is not None:
            self._clamp_lead(scene, i)
        return self.handles[i]

    def regulate_force(self, i, sensed_mag, setpoint, direction, gain=0.0002, rate=0.00015,
                       deadband=0.03):
        """Advance finger i's handle along `direction` to hold a force level.

        The step shrinks with the error so the loop converges into the
        deadband instead of limit-cycling around it (the handle-to-force
        gain of a stiff contact is roughly 1-2 N per mm).
        """
        err = setpoint - sensed_mag
        if abs(err) > deadband * max(setpoint, 0.2):
            step = float(np.clip(gain * err, -rate, rate))
            self.handles[i] = self.handles[i] + step * np.asarray(direction, dtype=float)
        return self.handles[i]


class SequenceDriver(ScriptedDriver):
    """Replays a prerecorded handle-target stream (used for bridge parity)."""

    def __init__(self, task: TaskSpec, seed: int, targets: list[dict[int, np.ndarray]]):
        super().__init__(task, seed)
        self.targets = targets

    def step(self, tick, scene, wrenches):
        if tick >= len(self.targets) - 1:
            self._done = True
        frame = self.targets[min(tick, len(self.targets) - 1)]
        out = {}
        for i, tgt in frame.items():
            self.handles[i] = np.asarray(tgt, dtype=float).copy()
            out[i] = self.handles[i]
        return out


class RecordingDriver(ScriptedDriver):
    """Wraps another driver and logs the handle targets it emitted."""

    def __init__(self, inner: ScriptedDriver):
        self.inner = inner
        self.log: list[dict[int, np.ndarray]] = []

    def start(self, scene):
        self.inner.start(scene)

    def finished(self, tick, scene):
        return self.inner.finished(tick, scene)

    def step(self, tick, scene, wrenches):
        out = self.inner.step(tick, scene, wrenches)
        self.log.append({i: np.asarray(t, dtype=float).copy() for i, t in out.items()})
        return out


class PressHoldDriver(ScriptedDriver):
    """Press the fingertip onto the table and hold a force setpoint.

    Phases: hover above the press spot, touch down slowly, regulate the
    sensed normal force at the setpoint for hold_s, then retreat upward.
    """

    def __init__(self, task: TaskSpec, seed: int, setpoint: float | None = None,
                 hold_s: float = 2.0, setpoint_jitter: float = 0.03):
        super().__init__(task, seed)
        base = setpoint if setpoint is not None else task.goal.get("setpoint", 1.0)
        self.setpoint = base * (1.0 + setpoint_jitter * self.rng.uniform(-1, 1))
        self.hold_ticks = int(round(hold_s * 30))
        # leftward-only jitter: the free distal joint presses stably when the
        # contact force line lands on the stop side of the elbow
        self.x_jitter = -0.003 * self.rng.uniform(0, 1)
        self.descend_slant = -0.4
        self.phase = "hover"
        self.held = 0
        self.retreat_left = 15

    def _contact_y(self, scene):
        table = scene.body("table")
        return table.world_vertices()[:, 1].max() + scene.fingers[0].chain.link_radius

    def start(self, scene):
        super().start(scene)
        self.handles[0][0] += self.x_jitter

    def step(self, tick, scene, wrenches):
        mag = wrenches[0].magnitude()
        cy = self._contact_y(scene)
        if self.phase == "hover":
            # near-vertical descent from the home posture, slanted slightly
            # left to counter the posture's rightward arc; slow near the table
            tip_y = scene.fingertip(0)[1]
            rate = 0.003 if tip_y > cy + 0.004 else 0.0006
            self.move_handle(0, (self.descend_slant * rate, -rate), rate=rate)
            if mag > 0.05:
                self.phase = "press"
        elif self.phase == "press":
            self.regulate_force(0, wrenches[0].force[1], self.setpoint, (0.0, -1.0))
            if abs(wrenches[0].force[1] - self.setpoint) < 0.05 * max(self.setpoint, 0.2):
                self.held += 1
            if self.held >= self.hold_ticks:
                self.phase = "retreat"
        else:
            self.move_handle(0, (0.0, 0.004), rate=0.004)
            self.retreat_left -= 1
            if self.retreat_left <= 0:
                self._done = True
        return {0: self.handles[0]}


class SlideCubeDriver(ScriptedDriver):
    """Push the railed cube along the shelf into the goal interval.

    The tip first climbs above the cube's airspace, traverses left of it,
    descends beside its upper-left face and pushes near the top edge while
    tracking the moving cube.
    """

    def __init__(self, task: TaskSpec, seed: int):
        super().__init__(task, seed)
        self.phase = "descend"
        self.push_pen = 0.0045 * (1.0 + 0.15 * self.rng.uniform(-1, 1))
        self.push_dy = 0.004 + 0.003 * self.rng.uniform(-1, 1)
        self.side_gap = 0.016 + 0.003 * self.rng.uniform(0, 1)
        self.goal_x = 0.5 * (task.success["lo"] + task.success["hi"])
        self.retreat_left = 20

    def step(self, tick, scene, wrenches):
        cube = scene.body("cube")
        half = 0.015
        r = scene.fingers[0].chain.link_radius
        right_face = cube.pose[0] + half
        cy = cube.pose[1]
        tip = scene.fingertip(0)
        if self.phase == "descend":
            # come down on the free side of the cube; the chain trails away
            # from it, so any lateral offset here is safe
            goal = (right_face + r + self.side_gap, cy + self.push_dy)
            self.servo_tip(scene, 0, goal, rate=0.0032)
            if abs(tip[0] - goal[0]) < 0.004 and abs(tip[1] - goal[1]) < 0.004:
                self.phase = "push"
        elif self.phase == "push":
            goal = (right_face + r - self.push_pen, cy + self.push_dy)
            self.servo_tip(scene, 0, goal, gain=0.6, rate=0.0023)
            if cube.pose[0] <= self.goal_x:
                self.phase = "retreat"
        else:
            self.move_handle(0, (0.0015, 0.0035), rate=0.004, scene=scene)
            self.retreat_left -= 1
            if self.retreat_left <= 0:
                self._done = True
        return {0: self.handles[0]}


class FlipBoxDriver(ScriptedDriver):
    """Two-finger flip: the right finger anchors above the pivot corner while
    the left finger pushes the top of the box sideways until gravity carries
    it over the pivot edge."""

    def __init__(self, task: TaskSpec, seed: int):
        super().__init__(task, seed)
        self.phase = "approach"
        self.push_pen = 0.005 * (1.0 + 0.2 * self.rng.uniform(-1, 1))
        self.anchor_force = 0.9 * (1.0 + 0.1 * self.rng.uniform(-1, 1))
        self.w = 0.05
        self.h = 0.035
        self.release_deg = 26.0
        self.stop_deg = 64.0 + 3.0 * self.rng.uniform(-1, 1)
        self.theta0 = None
        self.settle = 0
        self.retreat_left = 25

    def _angles(self, scene):
        box = scene.body("box")
        if self.theta0 is None:
            self.theta0 = box.pose[2]
        return box, abs(box.pose[2] - self.theta0)

    def _left_contact_goal(self, box, pen):
        # push point on the left face near the top, expressed in body frame
        c, s = np.cos(box.pose[2]), np.sin(box.pose[2])
        local = np.array([-self.w / 2 - 0.008 + pen, self.h / 2 - 0.010])
        return box.pose[:2] + np.array([c * local[0] - s * local[1], s * local[0] + c * local[1]])

    def step(self, tick, scene, wrenches):
        box, dtheta = self._angles(scene)
        deg = np.degrees(dtheta)
        if self.phase == "approach":
            lp = self._left_contact_goal(box, -0.006)
            self.servo_tip(scene, 0, lp, rate=0.0035)
            anchor = (box.pose[0] + self.w / 2 - 0.008, box.pose[1] + self.h / 2 + 0.006 + 0.008)
            self.servo_tip(scene, 1, anchor, rate=0.0035)
            t0 = scene.fingertip(0)
            t1 = scene.fingertip(1)
            if np.linalg.norm(t0 - lp) < 0.006 and np.linalg.norm(t1 - np.asarray(anchor)) < 0.006:
                self.phase = "anchor"
        elif self.phase == "anchor":
            self.regulate_force(1, wrenches[1].force[1], self.anchor_force, (0.0, -1.0))
            if wrenches[1].force[1] > self.anchor_force * 0.7:
                self.phase = "push"
        elif self.phase == "push":
            self.regulate_force(1, wrenches[1].force[1], self.anchor_force, (0.0, -1.0))
            lp = self._left_contact_goal(box, self.push_pen)
            self.servo_tip(scene, 0, lp, gain=0.5, rate=0.0022)
            if deg > self.release_deg:
                self.phase = "rotate"
        elif self.phase == "rotate":
            # anchor lifts away; pusher follows the rotating face
            self.move_handle(1, (0.004, 0.004), rate=0.004)
            lp = self._left_contact_goal(box, self.push_pen)
            self.servo_tip(scene, 0, lp, gain=0.5, rate=0.0022)
            if deg > self.stop_deg:
                self.phase = "retreat"
        else:
            self.move_handle(0, (-0.003, 0.004), rate=0.004)
            self.move_handle(1, (0.003, 0.004), rate=0.004)
            self.retreat_left -= 1
            if self.retreat_left <= 0 and deg > 70.0:
                self.settle += 1
                if self.settle > 20:
                    self._done = True
        return {0: self.handles[0], 1: self.handles[1]}


class PinchLiftDriver(ScriptedDriver):
    """Squeeze the standing bar from both sides and lift it."""

    def __init__(self, task: TaskSpec, seed: int):
        super().__init__(task, seed)
        self.phase = "approach"
        self.squeeze = 1.3 * (1.0 + 0.12 * self.rng.uniform(-1, 1))
        self.lift_height = 0.045
        self.lift_progress = 0.0
        self.hold = 0

    def step(self, tick, scene, wrenches):
        bar = scene.body("bar")
        half = 0.008
        r = scene.fingers[0].chain.link_radius
        bx, by = bar.pose[0], bar.pose[1]
        if self.phase == "approach":
            g0 = (bx - half - r - 0.02, by + 0.004)
            g1 = (bx + half + r + 0.02, by + 0.004)
            self.servo_tip(scene, 0, g0, rate=0.0035)
            self.servo_tip(scene, 1, g1, rate=0.0035)
            if (np.linalg.norm(scene.fingertip(0) - np.asarray(g0)) < 0.005
                    and np.linalg.norm(scene.fingertip(1) - np.asarray(g1)) < 0.005):
                self.phase = "squeeze"
        elif self.phase == "squeeze":
            self.regulate_force(0, wrenches[0].magnitude(), self.squeeze, (1.0, 0.0), rate=0.0004)
            self.regulate_force(1, wrenches[1].magnitude(), self.squeeze, (-1.0, 0.0), rate=0.0004)
            if (wrenches[0].magnitude() > self.squeeze * 0.85
                    and wrenches[1].magnitude() > self.squeeze * 0.85):
                self.phase = "lift"
        elif self.phase == "lift":
            self.regulate_force(0, wrenches[0].magnitude(), self.squeeze, (1.0, 0.0))
            self.regulate_force(1, wrenches[1].magnitude(), self.squeeze, (-1.0, 0.0))
            if self.lift_progress < self.lift_height:
                dy = min(0.0012, self.lift_height - self.lift_progress)
                self.move_handle(0, (0.0, dy), rate=0.0015)
                self.move_handle(1, (0.0, dy), rate=0.0015)
                self.lift_progress += dy
            else:
                self.hold += 1
                if self.hold > 25:
                    self._done = True
        return {0: self.handles[0], 1: self.handles[1]}


_DRIVERS = {
    "press-hold": PressHoldDriver,
    "slide-cube": SlideCubeDriver,
    "flip-box": FlipBoxDriver,
    "pinch-lift": PinchLiftDriver,
}


def scripted_driver(task: TaskSpec, seed: int, **kwargs) -> ScriptedDriver:
    """Driver for a task (OOD variants reuse their base task's driver)."""
    base = task.name
    for known in _DRIVERS:
        if base == known or base.startswith(known + "-"):
            return _DRIVERS[known](task, seed, **kwargs)
    raise KeyError(f"no scripted driver for task {task.name!r}")
