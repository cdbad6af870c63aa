"""Two-stage demonstration collection.

Stage 1 extracts force-informed fingertip targets from a kinesthetic
recording: the observed position plus a stiffness-scaled offset along the
force the finger applied. Stage 2 replays those targets under impedance
control on the same seeded scene and records robot-only frames with images
for policy training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .control import ImpedanceGains, control_tick
from .hand import forward_kinematics, hand_spec_hash
from .sim import (
    CONTROL_HZ,
    Handle,
    Scene,
    Wrench,
    render_raster,
    sense_wrench,
)
from .tasks import Outcome, TaskSpec, label_outcome, reset_task

RECORD_HZ = CONTROL_HZ
IMAGE_SIZE = 64


class PipelineError(RuntimeError):
    pass


@dataclass
class FingerFrame:
    """Per-finger state at one recorded tick (sensor frame wrench)."""

    x_o: np.ndarray
    q: np.ndarray
    force: np.ndarray
    moment: float
    target: np.ndarray | None = None  # executed target, replay stage only

    def copy(self) -> "FingerFrame":
        return FingerFrame(
            x_o=self.x_o.copy(),
            q=self.q.copy(),
            force=self.force.copy(),
            moment=self.moment,
            target=None if self.target is None else self.target.copy(),
        )


@dataclass
class Frame:
    """One recorded tick; timestamps are exact rationals tick/rate."""

    tick: int
    rate: int
    fingers: list[FingerFrame]
    image: np.ndarray | None = None  # uint8 grayscale, replay stage only

    @property
    def t(self) -> float:
        return self.tick / self.rate

    def copy(self) -> "Frame":
        return Frame(
            tick=self.tick,
            rate=self.rate,
            fingers=[f.copy() for f in self.fingers],
            image=None if self.image is None else self.image.copy(),
        )


STAGE_KINESTHETIC = "kinesthetic"
STAGE_REPLAY = "replay"


@dataclass
class Demonstration:
    task: str
    seed: int
    stage: str
    record_hz: int
    n_fingers: int
    hand_hash: str
    frames: list[Frame]
    image_size: tuple[int, int] | None = None
    extraction: dict | None = None
    outcome: str | None = None
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class ExtractionConfig:
    """Eq of the target offset: x_f = x_o + kf * (finger-on-object force).

    Sensors report the object-on-finger wrench, so the sign flip lives here
    and only here. filter_window > 1 applies a centered moving average to
    the force sequence first (off by default; meant for raw human input).
    """

    kf: float = 1.0 / 220.0
    filter_window: int = 0

    def __post_init__(self):
        if self.kf <= 0:
            raise ValueError("kf must be positive")
        if self.filter_window < 0:
            raise ValueError("filter_window must be >= 0")

    def to_dict(self) -> dict:
        return {"kf": self.kf, "filter_window": self.filter_window, "sign": "negate_sensed"}


@dataclass
class ForceInformedTrajectory:
    """Per-finger target sequences, one row per source frame."""

    targets: np.ndarray  # (T, n_fingers, 2)
    source_task: str
    source_seed: int
    kf: float

    def __len__(self) -> int:
        return self.targets.shape[0]


def force_informed_target(x_o, sensed: Wrench, config: ExtractionConfig) -> np.ndarray:
    """Position target that reproduces the sensed force under stiffness kf.

    The moment is deliberately ignored; targets are positions only.
    """
    return np.asarray(x_o, dtype=float) + config.kf * (-sensed.force)


def _smooth(forces: np.ndarray, window: int) -> np.ndarray:
    if window <= 1:
        return forces
    kernel = np.ones(window) / window
    out = np.empty_like(forces)
    for col in range(forces.shape[1]):
        out[:, col] = np.convolve(forces[:, col], kernel, mode="same")
    return out


def extract_stage1(demo: Demonstration, config: ExtractionConfig) -> ForceInformedTrajectory:
    """Stage 1: elementwise force-informed targets from a kinesthetic demo."""
    if demo.stage != STAGE_KINESTHETIC:
        raise PipelineError(f"stage-1 extraction expects a kinesthetic demo, got {demo.stage!r}")
    if not demo.frames:
        raise PipelineError("cannot extract from an empty demonstration")
    T, nf = len(demo.frames), demo.n_fingers
    targets = np.empty((T, nf, 2))
    for fi in range(nf):
        forces = np.array([fr.fingers[fi].force for fr in demo.frames])
        forces = _smooth(forces, config.filter_window)
        for k, frame in enumerate(demo.frames):
            sensed = Wrench(force=forces[k], moment=frame.fingers[fi].moment)
            targets[k, fi] = force_informed_target(frame.fingers[fi].x_o, sensed, config)
    return ForceInformedTrajectory(
        targets=targets, source_task=demo.task, source_seed=demo.seed, kf=config.kf
    )


def observed_position_trajectory(demo: Demonstration) -> ForceInformedTrajectory:
    """Baseline targets: the observed positions themselves, no force term."""
    targets = np.array([[f.x_o for f in fr.fingers] for fr in demo.frames])
    return ForceInformedTrajectory(
        targets=targets, source_task=demo.task, source_seed=demo.seed, kf=0.0
    )


def _capture_finger(scene: Scene, i: int, wrench: Wrench, target=None) -> FingerFrame:
    finger = scene.fingers[i]
    return FingerFrame(
        x_o=forward_kinematics(finger.chain, finger.state.q),
        q=finger.state.q.copy(),
        force=wrench.force.copy(),
        moment=wrench.moment,
        target=None if target is None else np.asarray(target, dtype=float).copy(),
    )


def capture_image(scene: Scene, size: int = IMAGE_SIZE) -> np.ndarray:
    return np.round(render_raster(scene, size, size) * 255.0).astype(np.uint8)


def record_kinesthetic(
    task: TaskSpec,
    seed: int,
    driver,
    max_ticks: int | None = None,
) -> Demonstration:
    """Record a kinesthetic demonstration driven through the operator handle.

    The driver sees the live scene and last sensed wrenches at every tick
    and answers with handle targets; its `finished` flag ends the recording.
    Gravity on the fingers is actuator-compensated, so the handle drags a
    weightless arm, like a human moving a gravity-compensated robot.
    """
    scene = reset_task(task, seed)
    horizon = max_ticks or int(round(task.horizon_s * RECORD_HZ))
    driver.start(scene)
    frames: list[Frame] = []
    wrenches = [Wrench.zero() for _ in scene.fingers]
    truncated = False
    from .sim import run_substeps  # late import to keep module load light

    for tick in range(horizon):
        targets = driver.step(tick, scene, wrenches)
        for i, tgt in targets.items():
            finger = scene.fingers[i]
            if finger.handle is None:
                finger.handle = Handle(target=np.asarray(tgt, dtype=float).copy())
            else:
                finger.handle.target = np.asarray(tgt, dtype=float).copy()
        scene_next, wrenches_now = run_substeps(scene)
        frames.append(
            Frame(
                tick=tick,
                rate=RECORD_HZ,
                fingers=[
                    _capture_finger(scene, i, wrenches_now[i]) for i in range(len(scene.fingers))
                ],
            )
        )
        scene = scene_next
        wrenches = wrenches_now
        if driver.finished(tick, scene):
            break
    return Demonstration(
        task=task.name,
        seed=seed,
        stage=STAGE_KINESTHETIC,
        record_hz=RECORD_HZ,
        n_fingers=len(scene.fingers),
        hand_hash=hand_spec_hash([f.chain for f in scene.fingers]),
        frames=frames,
        truncated=truncated,
    )


@dataclass
class TracePoint:
    scene: Scene
    wrenches: list[Wrench]


def replay_stage2(
    task: TaskSpec,
    seed: int,
    traj: ForceInformedTrajectory,
    gains: ImpedanceGains | None = None,
    image_size: int = IMAGE_SIZE,
    extraction: ExtractionConfig | None = None,
) -> Demonstration:
    """Stage 2: robot-only replay of force-informed targets on the same seed.

    Tracks the targets at the recording rate with the impedance controller,
    captures images, and labels the outcome against the task predicates.
    """
    scene = reset_task(task, seed)
    if traj.targets.shape[1] != len(scene.fingers):
        raise PipelineError("trajectory finger count does not match the task")
    gains = gains or ImpedanceGains()
    frames: list[Frame] = []
    trace: list[TracePoint] = []
    current = scene
    for k in range(len(traj)):
        tick_targets = {i: traj.targets[k, i] for i in range(len(current.fingers))}
        nxt, wrenches = control_tick(current, tick_targets, gains)
        frames.append(
            Frame(
                tick=k,
                rate=RECORD_HZ,
                fingers=[
                    _capture_finger(current, i, wrenches[i], target=traj.targets[k, i])
                    for i in range(len(current.fingers))
                ],
                image=capture_image(current, image_size),
            )
        )
        trace.append(TracePoint(scene=current, wrenches=wrenches))
        current = nxt
    outcome = label_outcome(task, trace) if trace else Outcome("failure", {})
    return Demonstration(
        task=task.name,
        seed=seed,
        stage=STAGE_REPLAY,
        record_hz=RECORD_HZ,
        n_fingers=len(scene.fingers),
        hand_hash=hand_spec_hash([f.chain for f in scene.fingers]),
        frames=frames,
        image_size=(image_size, image_size),
        extraction=extraction.to_dict() if extraction else None,
        outcome=outcome.label,
    )


def replay_trace(task: TaskSpec, seed: int, traj: ForceInformedTrajectory,
                 gains: ImpedanceGains | None = None) -> tuple[list[TracePoint], Outcome]:
    """Replay without recording images; returns the trace and its label."""
    scene = reset_task(task, seed)
    gains = gains or ImpedanceGains()
    trace = []
    current = scene
    for k in range(len(traj)):
        tick_targets = {i: traj.targets[k, i] for i in range(len(current.fingers))}
        nxt, wrenches = control_tick(current, tick_targets, gains)
        trace.append(TracePoint(scene=current, wrenches=wrenches))
        current = nxt
    return trace, label_outcome(task, trace)
