"""Task scenes: blueprints, seeded resets, and outcome labeling.

A task lives in a plain-text JSON file (format_version, scene bodies and
fingers, randomization region, success/partial rules). Four reference tasks
ship as package data: press-hold, slide-cube, flip-box, pinch-lift, plus OOD
variants that override object parameters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .hand import FingerChain, JointState
from .sim import (
    Body,
    Circle,
    ContactParams,
    FingerSim,
    Polygon,
    RailConstraint,
    Scene,
    Wrench,
    box_inertia,
    circle_inertia,
)

TASK_FORMAT_VERSION = 1

OUTCOME_SUCCESS = "success"
OUTCOME_PARTIAL = "partial"
OUTCOME_FAILURE = "failure"


class TaskFileError(ValueError):
    """Malformed or unsupported task description file."""


@dataclass(frozen=True)
class Outcome:
    label: str
    metrics: dict

    @property
    def success(self) -> bool:
        return self.label == OUTCOME_SUCCESS


@dataclass
class TaskSpec:
    name: str
    horizon_s: float
    blueprint: dict  # gravity, contact, view, bodies, fingers
    init: dict  # randomized offsets applied at reset
    success: dict  # named rule + parameters
    partial: dict | None
    ood_overrides: dict | None = None
    goal: dict | None = None  # display hint for UIs / reports

    @property
    def n_fingers(self) -> int:
        return len(self.blueprint["fingers"])

    @classmethod
    def from_dict(cls, data: dict) -> "TaskSpec":
        version = data.get("format_version")
        if version != TASK_FORMAT_VERSION:
            raise TaskFileError(f"unsupported task format_version {version!r}")
        for key in ("name", "horizon_s", "scene", "init", "success"):
            if key not in data:
                raise TaskFileError(f"task file missing {key!r}")
        return cls(
            name=data["name"],
            horizon_s=float(data["horizon_s"]),
            blueprint=data["scene"],
            init=data["init"],
            success=data["success"],
            partial=data.get("partial"),
            ood_overrides=data.get("ood_overrides"),
            goal=data.get("goal"),
        )

    @classmethod
    def from_file(cls, path) -> "TaskSpec":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise TaskFileError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        data = {
            "format_version": TASK_FORMAT_VERSION,
            "name": self.name,
            "horizon_s": self.horizon_s,
            "scene": self.blueprint,
            "init": self.init,
            "success": self.success,
        }
        if self.partial is not None:
            data["partial"] = self.partial
        if self.ood_overrides is not None:
            data["ood_overrides"] = self.ood_overrides
        if self.goal is not None:
            data["goal"] = self.goal
        return data

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def chains(self) -> list[FingerChain]:
        return [_build_chain(f) for f in self.blueprint["fingers"]]


def _build_chain(spec: dict) -> FingerChain:
    return FingerChain(
        link_lengths=tuple(spec["lengths"]),
        link_masses=tuple(spec["masses"]),
        link_com_offsets=tuple(spec["com"]),
        joint_limits=tuple(tuple(l) for l in spec["limits"]),
        base_pose=tuple(spec["base"]),
        sensor_link_index=spec.get("sensor_link", -1),
        link_radius=spec.get("link_radius", 0.008),
        tip_mass=spec.get("tip_mass", 0.0),
        joint_damping=tuple(spec["damping"]) if "damping" in spec else 0.01,
        joint_stiffness=tuple(spec["stiffness"]) if "stiffness" in spec else None,
        joint_rest=tuple(spec["rest"]) if "rest" in spec else None,
    )


def _build_body(spec: dict) -> Body:
    shape_spec = spec["shape"]
    kind = shape_spec["kind"]
    static = spec.get("static", False)
    mass = float(spec.get("mass", 0.0))
    if kind == "box":
        w, h = float(shape_spec["w"]), float(shape_spec["h"])
        shape = Polygon.box(w, h)
        inertia = box_inertia(mass, w, h) if mass > 0 else 0.0
    elif kind == "circle":
        r = float(shape_spec["radius"])
        shape = Circle(r)
        inertia = circle_inertia(mass, r) if mass > 0 else 0.0
    elif kind == "polygon":
        shape = Polygon(shape_spec["vertices"])
        inertia = float(spec.get("inertia", 0.0))
    else:
        raise TaskFileError(f"unknown shape kind {kind!r}")
    rail = None
    if "rail" in spec and spec["rail"] is not None:
        r = spec["rail"]
        rail = RailConstraint(
            origin=np.asarray(r["origin"], dtype=float),
            axis=np.asarray(r["axis"], dtype=float),
            dry_friction=float(r.get("dry_friction", 0.0)),
        )
    return Body(
        name=spec["name"],
        shape=shape,
        mass=mass,
        inertia=float(spec.get("inertia", inertia)),
        pose=np.asarray(spec.get("pose", (0.0, 0.0, 0.0)), dtype=float),
        static=static,
        rail=rail,
    )


def build_scene(task: TaskSpec) -> Scene:
    """Deterministic scene straight from the blueprint (no randomization)."""
    bp = task.blueprint
    contact = bp.get("contact", {})
    fingers = []
    for fs in bp["fingers"]:
        chain = _build_chain(fs)
        q0 = np.asarray(fs.get("q0", [0.0] * chain.n_joints), dtype=float)
        fingers.append(FingerSim(chain=chain, state=JointState.rest(chain, q0)))
    return Scene(
        bodies=[_build_body(b) for b in bp["bodies"]],
        fingers=fingers,
        contact_params=ContactParams(**contact),
        gravity=np.asarray(bp.get("gravity", (0.0, -9.81)), dtype=float),
        view=tuple(bp.get("view", (-0.2, 0.0, 0.2, 0.3))),
    )


def reset_task(task: TaskSpec, seed: int) -> Scene:
    """Deterministic randomized initial scene for (task, seed).

    Samples the init offsets for the named body in a fixed order, then
    applies the task's OOD overrides when present.
    """
    scene = build_scene(task)
    rng = np.random.default_rng(seed)
    init = task.init
    body = scene.body(init["body"]) if init.get("body") else None
    if body is not None:
        for axis, key in ((0, "dx"), (1, "dy"), (2, "dtheta")):
            lo, hi = init.get(key, (0.0, 0.0))
            if lo == hi:
                offset = lo
            else:
                offset = float(rng.uniform(lo, hi))
            body.pose[axis] += offset
        if body.rail is not None:
            # keep the rail anchored to the randomized pose
            body.rail = RailConstraint(
                origin=body.pose[:2].copy(),
                axis=body.rail.axis,
                dry_friction=body.rail.dry_friction,
            )
    if task.ood_overrides:
        _apply_overrides(scene, task.ood_overrides)
    return scene


def _apply_overrides(scene: Scene, overrides: dict) -> None:
    body = scene.body(overrides["body"]) if overrides.get("body") else None
    mult = overrides.get("mass_multiplier")
    if mult is not None and body is not None:
        body.mass *= mult
        body.inertia *= mult
    dry = overrides.get("dry_friction")
    if dry is not None and body is not None and body.rail is not None:
        body.rail = RailConstraint(
            origin=body.rail.origin, axis=body.rail.axis, dry_friction=float(dry)
        )


def with_ood(task: TaskSpec, overrides: dict, suffix: str = "ood") -> TaskSpec:
    data = task.to_dict()
    data["name"] = f"{task.name}-{suffix}"
    data["ood_overrides"] = overrides
    return TaskSpec.from_dict(data)


# -- outcome labeling -------------------------------------------------------


def _body_trajectory(trace, name: str) -> np.ndarray:
    return np.array([p.scene.body(name).pose for p in trace])


def _force_magnitudes(trace, finger: int) -> np.ndarray:
    return np.array([p.wrenches[finger].magnitude() for p in trace])


def _rule_body_x_in(params, trace, scene0):
    body = params["body"]
    x = trace[-1].scene.body(body).pose[0]
    return params["lo"] <= x <= params["hi"], {"final_x": float(x)}


def _rule_travel_fraction(params, trace, scene0):
    body = params["body"]
    x0 = scene0.body(body).pose[0]
    x1 = trace[-1].scene.body(body).pose[0]
    goal = params["goal_x"]
    denom = goal - x0
    frac = (x1 - x0) / denom if abs(denom) > 1e-9 else 0.0
    return frac >= params["fraction"], {"travel_fraction": float(frac)}


def _rule_sustained_force(params, trace, scene0):
    mags = _force_magnitudes(trace, params.get("finger", 0))
    rate = params.get("rate_hz", 30.0)
    need = int(round(params["duration_s"] * rate))
    lo, hi = params["lo"], params["hi"]
    ok = np.logical_and(mags >= lo, mags <= hi)
    run = best = 0
    for flag in ok:
        run = run + 1 if flag else 0
        best = max(best, run)
    return best >= need, {"sustained_ticks": int(best), "peak_force": float(mags.max() if len(mags) else 0.0)}


def _rule_contact_made(params, trace, scene0):
    mags = _force_magnitudes(trace, params.get("finger", 0))
    peak = float(mags.max()) if len(mags) else 0.0
    return peak > params.get("threshold", 0.55), {"peak_force": peak}


def _unwrap_angles(thetas: np.ndarray) -> np.ndarray:
    return np.unwrap(thetas)


def _rule_angle_reached(params, trace, scene0):
    body = params["body"]
    poses = _body_trajectory(trace, body)
    theta = _unwrap_angles(poses[:, 2])
    delta = np.abs(theta - scene0.body(body).pose[2])
    target = math.radians(params["target_deg"])
    tol = math.radians(params["tol_deg"])
    final = float(delta[-1])
    return abs(final - target) <= tol, {
        "final_rotation_deg": math.degrees(final),
        "peak_rotation_deg": math.degrees(float(delta.max())),
    }


def _rule_angle_peak_in(params, trace, scene0):
    body = params["body"]
    poses = _body_trajectory(trace, body)
    theta = _unwrap_angles(poses[:, 2])
    delta = np.abs(theta - scene0.body(body).pose[2])
    peak = float(delta.max())
    lo = math.radians(params["lo_deg"])
    hi = math.radians(params["hi_deg"])
    return lo <= peak < hi, {"peak_rotation_deg": math.degrees(peak)}


def _rule_lifted(params, trace, scene0):
    body = params["body"]
    y0 = scene0.body(body).pose[1]
    y1 = trace[-1].scene.body(body).pose[1]
    return y1 >= y0 + params["height"], {"final_lift": float(y1 - y0)}


def _rule_lift_peak(params, trace, scene0):
    body = params["body"]
    y0 = scene0.body(body).pose[1]
    ys = _body_trajectory(trace, body)[:, 1]
    peak = float(ys.max() - y0)
    return peak >= params["height"], {"peak_lift": peak}


_RULES = {
    "body_x_in": _rule_body_x_in,
    "travel_fraction": _rule_travel_fraction,
    "sustained_force": _rule_sustained_force,
    "contact_made": _rule_contact_made,
    "angle_reached": _rule_angle_reached,
    "angle_peak_in": _rule_angle_peak_in,
    "lifted": _rule_lifted,
    "lift_peak": _rule_lift_peak,
}


def _eval_rule(spec: dict, trace, scene0):
    rule = spec["rule"]
    if rule not in _RULES:
        raise TaskFileError(f"unknown predicate rule {rule!r}")
    return _RULES[rule](spec, trace, scene0)


def label_outcome(task: TaskSpec, trace, scene0: Scene | None = None) -> Outcome:
    """Label a trace success/partial/failure; success wins over partial.

    trace entries need .scene and .wrenches (one per recorded tick); scene0
    defaults to the first entry's scene.
    """
    if not trace:
        return Outcome(OUTCOME_FAILURE, {"empty": True})
    scene0 = scene0 or trace[0].scene
    ok, metrics = _eval_rule(task.success, trace, scene0)
    if ok:
        return Outcome(OUTCOME_SUCCESS, metrics)
    if task.partial is not None:
        partial_ok, pm = _eval_rule(task.partial, trace, scene0)
        metrics.update(pm)
        if partial_ok:
            return Outcome(OUTCOME_PARTIAL, metrics)
    return Outcome(OUTCOME_FAILURE, metrics)


# -- built-in tasks -----------------------------------------------------------


def builtin_task_names() -> list[str]:
    names = []
    for entry in resources.files("dexforge.data").iterdir():
        if entry.name.endswith(".task.json"):
            names.append(entry.name[: -len(".task.json")])
    return sorted(names)


def load_task(name_or_path: str) -> TaskSpec:
    """Load a built-in task by name, or any task file by path."""
    path = Path(name_or_path)
    if path.suffix == ".json" and path.exists():
        return TaskSpec.from_file(path)
    ref = resources.files("dexforge.data") / f"{name_or_path}.task.json"
    if not ref.is_file():
        raise TaskFileError(
            f"unknown task {name_or_path!r}; built-ins: {', '.join(builtin_task_names())}"
        )
    return TaskSpec.from_dict(json.loads(ref.read_text()))
