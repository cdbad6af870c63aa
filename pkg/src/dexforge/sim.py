"""Deterministic planar rigid-body simulation with penalty contacts.

Fixed-timestep semi-implicit Euler over circles, convex polygons and
articulated finger chains. Contacts use a spring-damper normal law with
Coulomb stick-slip tangential springs. Fingertip force/torque sensing
aggregates contact forces on links at or distal to the sensor link, so
forces applied proximal to the sensor (the operator's grip) never show up
in sensed wrenches.

Scenes are values: `step` returns a new scene and leaves its input alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .hand import (
    FingerChain,
    JointState,
    _point_jacobian,
    gravity_vector,
    joint_positions,
    mass_matrix,
)

PHYSICS_DT = 1.0 / 600.0
CONTROL_HZ = 30
SUBSTEPS_PER_TICK = 20  # 600 Hz physics, 30 Hz control/recording

HANDLE_STIFFNESS = 2000.0


class SimulationDivergedError(RuntimeError):
    """Raised when a state stops being finite; carries the offending tick."""

    def __init__(self, tick: int):
        super().__init__(f"simulation diverged at tick {tick}")
        self.tick = tick


@dataclass
class Wrench:
    """Object-on-finger force and moment at the sensor origin (world axes)."""

    force: np.ndarray
    moment: float

    @classmethod
    def zero(cls) -> "Wrench":
        return cls(force=np.zeros(2), moment=0.0)

    def magnitude(self) -> float:
        return float(np.linalg.norm(self.force))

    def copy(self) -> "Wrench":
        return Wrench(force=self.force.copy(), moment=self.moment)


@dataclass(frozen=True)
class ContactParams:
    k_n: float = 1e4  # normal stiffness N/m
    c_n: float = 50.0  # normal damping N*s/m
    k_t: float = 3e3  # tangential stiffness N/m
    mu: float = 0.5  # Coulomb friction coefficient

    def __post_init__(self):
        if self.k_n <= 0:
            raise ValueError("k_n must be positive")
        if self.mu < 0 or self.c_n < 0 or self.k_t < 0:
            raise ValueError("c_n, k_t, mu must be non-negative")


@dataclass(frozen=True)
class ContactForce:
    normal: float
    tangential: float
    slipped: bool

    def __iter__(self):
        return iter((self.normal, self.tangential))


def contact_force(
    penetration: float,
    penetration_rate: float,
    tangential_stretch: float,
    params: ContactParams,
) -> ContactForce:
    """Penalty contact law.

    Normal force k_n*d + c_n*d_rate, clamped non-negative (never adhesive)
    and zero without penetration. Tangential force is the k_t spring clamped
    to the friction cone; `slipped` tells the caller to let its anchor slip.
    """
    if penetration <= 0.0:
        return ContactForce(0.0, 0.0, False)
    fn = params.k_n * penetration + params.c_n * penetration_rate
    if fn <= 0.0:
        return ContactForce(0.0, 0.0, False)
    ft = params.k_t * tangential_stretch
    cap = params.mu * fn
    if ft > cap:
        return ContactForce(fn, cap, True)
    if ft < -cap:
        return ContactForce(fn, -cap, True)
    return ContactForce(fn, ft, False)


# -- shapes -------------------------------------------------------------------


@dataclass(frozen=True)
class Circle:
    radius: float


class Polygon:
    """Convex polygon, vertices counter-clockwise in the body frame."""

    def __init__(self, vertices):
        self.vertices = np.asarray(vertices, dtype=float)
        if self.vertices.shape[0] < 3:
            raise ValueError("polygon needs at least 3 vertices")
        edges = np.roll(self.vertices, -1, axis=0) - self.vertices
        normals = np.stack([edges[:, 1], -edges[:, 0]], axis=1)
        self.normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)

    @classmethod
    def box(cls, w: float, h: float) -> "Polygon":
        hw, hh = w / 2.0, h / 2.0
        return cls([(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)])


def box_inertia(mass: float, w: float, h: float) -> float:
    return mass * (w * w + h * h) / 12.0


def circle_inertia(mass: float, r: float) -> float:
    return mass * r * r / 2.0


@dataclass
class RailConstraint:
    """Prismatic guide: the body translates along `axis` only, no rotation.

    dry_friction is a constant Coulomb-style resistance (N) along the rail,
    applied at velocity level so it can stop but never reverse the body.
    """

    origin: np.ndarray
    axis: np.ndarray
    dry_friction: float = 0.0

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        axis = np.asarray(self.axis, dtype=float)
        self.axis = axis / np.linalg.norm(axis)


@dataclass
class Body:
    name: str
    shape: Circle | Polygon
    mass: float = 0.0
    inertia: float = 0.0
    pose: np.ndarray = None  # (x, y, angle)
    velocity: np.ndarray = None  # (vx, vy, omega)
    static: bool = False
    rail: RailConstraint | None = None

    def __post_init__(self):
        self.pose = np.zeros(3) if self.pose is None else np.asarray(self.pose, dtype=float).copy()
        self.velocity = (
            np.zeros(3) if self.velocity is None else np.asarray(self.velocity, dtype=float).copy()
        )
        self._geom_cache = None
        if not self.static:
            if self.mass <= 0:
                raise ValueError(f"dynamic body {self.name!r} needs positive mass")
            if self.inertia <= 0:
                raise ValueError(f"dynamic body {self.name!r} needs positive inertia")

    def copy(self) -> "Body":
        body = Body(
            name=self.name,
            shape=self.shape,
            mass=self.mass,
            inertia=self.inertia,
            pose=self.pose.copy(),
            velocity=self.velocity.copy(),
            static=self.static,
            rail=self.rail,
        )
        if self.static:
            body._geom_cache = self._geom_cache
        return body

    def world_vertices(self) -> np.ndarray:
        return self.world_geometry()[0]

    def world_normals(self) -> np.ndarray:
        return self.world_geometry()[1]

    def world_geometry(self):
        """(vertices, normals, bounding radius, center) in world coordinates.

        Cached for static bodies; recomputed per call otherwise.
        """
        cache = getattr(self, "_geom_cache", None)
        if cache is not None and self.static:
            return cache
        c, s = np.cos(self.pose[2]), np.sin(self.pose[2])
        R = np.array([[c, -s], [s, c]])
        if isinstance(self.shape, Circle):
            geom = (None, None, self.shape.radius, self.pose[:2].copy())
        else:
            verts = self.shape.vertices @ R.T + self.pose[:2]
            normals = self.shape.normals @ R.T
            radius = float(np.sqrt(((verts - self.pose[:2]) ** 2).sum(axis=1).max()))
            geom = (verts, normals, radius, self.pose[:2].copy())
        if self.static:
            self._geom_cache = geom
        return geom

    def point_velocity(self, p: np.ndarray) -> np.ndarray:
        if self.static:
            return np.zeros(2)
        r = p - self.pose[:2]
        w = self.velocity[2]
        return self.velocity[:2] + np.array([-w * r[1], w * r[0]])


@dataclass
class Handle:
    """Virtual operator grip: a spring-damper from the grip point to a target."""

    target: np.ndarray
    stiffness: float = HANDLE_STIFFNESS
    damping: float | None = None  # default set from stiffness at application

    def copy(self) -> "Handle":
        return Handle(target=self.target.copy(), stiffness=self.stiffness, damping=self.damping)


@dataclass
class FingerSim:
    chain: FingerChain
    state: JointState
    handle: Handle | None = None
    limit_clamped: bool = False

    def copy(self) -> "FingerSim":
        return FingerSim(
            chain=self.chain,
            state=self.state.copy(),
            handle=self.handle.copy() if self.handle else None,
            limit_clamped=self.limit_clamped,
        )


@dataclass
class Scene:
    bodies: list[Body]
    fingers: list[FingerSim]
    contact_params: ContactParams
    gravity: np.ndarray = None
    dt: float = PHYSICS_DT
    view: tuple[float, float, float, float] = (-0.2, 0.0, 0.2, 0.3)
    tick: int = 0
    stretches: dict = field(default_factory=dict)
    # exact actuator-level gravity compensation on the fingers (the usual
    # inner-servo-loop behavior); commanded torques then act on a weightless
    # chain. Turn off to drive raw torques against gravity.
    finger_gravity_comp: bool = True

    def __post_init__(self):
        self.gravity = (
            np.array([0.0, -9.81]) if self.gravity is None else np.asarray(self.gravity, dtype=float)
        )

    def copy(self) -> "Scene":
        return Scene(
            bodies=[b.copy() for b in self.bodies],
            fingers=[f.copy() for f in self.fingers],
            contact_params=self.contact_params,
            gravity=self.gravity.copy(),
            dt=self.dt,
            view=self.view,
            tick=self.tick,
            stretches=dict(self.stretches),
            finger_gravity_comp=self.finger_gravity_comp,
        )

    def body(self, name: str) -> Body:
        for b in self.bodies:
            if b.name == name:
                return b
        raise KeyError(f"no body named {name!r}")

    def fingertip(self, i: int) -> np.ndarray:
        f = self.fingers[i]
        return joint_positions(f.chain, f.state.q)[-1]

    @property
    def time(self) -> float:
        return self.tick * self.dt


# -- geometric queries ---------------------------------------------------------
# scalar implementations: these run hundreds of times per physics substep,
# where small-array numpy overhead dominates


def _closest_on_segment(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    abx, aby = b[0] - a[0], b[1] - a[1]
    denom = abx * abx + aby * aby
    if denom == 0.0:
        return a
    s = ((p[0] - a[0]) * abx + (p[1] - a[1]) * aby) / denom
    s = min(1.0, max(0.0, s))
    return np.array([a[0] + s * abx, a[1] + s * aby])


def _deepest_face(p, verts, normals):
    """Signed distance of p past each face; returns (inside, depth, face index)."""
    px, py = p[0], p[1]
    dmax = -np.inf
    imax = 0
    for i in range(len(verts)):
        d = normals[i, 0] * (px - verts[i, 0]) + normals[i, 1] * (py - verts[i, 1])
        if d > dmax:
            dmax = d
            imax = i
    return dmax <= 0.0, -dmax, imax


@dataclass
class _Contact:
    key: tuple
    a: tuple  # ("body", i) or ("finger", fi, link)
    b: tuple  # ("body", j)
    point: np.ndarray
    normal: np.ndarray  # unit, pointing from b toward a
    penetration: float


def _circle_circle(ca, ra, cb, rb):
    dx, dy = ca[0] - cb[0], ca[1] - cb[1]
    dist = np.sqrt(dx * dx + dy * dy)
    pen = ra + rb - dist
    if pen <= 0.0:
        return None
    if dist > 1e-12:
        n = np.array([dx / dist, dy / dist])
    else:
        n = np.array([0.0, 1.0])
    point = np.array([cb[0] + n[0] * rb, cb[1] + n[1] * rb])
    return point, n, pen


def _circle_polygon(c, r, verts, normals):
    cx, cy = c[0], c[1]
    nv = len(verts)
    dmax = -np.inf
    face = 0
    for i in range(nv):
        d = normals[i, 0] * (cx - verts[i, 0]) + normals[i, 1] * (cy - verts[i, 1])
        if d > dmax:
            dmax = d
            face = i
    if dmax <= 0.0:  # center inside: push out through the least-violated face
        n = normals[face]
        depth = -dmax
        return np.array([cx + n[0] * depth, cy + n[1] * depth]), n.copy(), r + depth
    if dmax >= r:  # cheap reject: face distance lower-bounds boundary distance
        return None
    best_d2 = np.inf
    bx = by = 0.0
    for i in range(nv):
        ax, ay = verts[i, 0], verts[i, 1]
        j = i + 1 if i + 1 < nv else 0
        ex, ey = verts[j, 0] - ax, verts[j, 1] - ay
        denom = ex * ex + ey * ey
        s = ((cx - ax) * ex + (cy - ay) * ey) / denom
        s = min(1.0, max(0.0, s))
        qx, qy = ax + s * ex, ay + s * ey
        d2 = (cx - qx) ** 2 + (cy - qy) ** 2
        if d2 < best_d2:
            best_d2 = d2
            bx, by = qx, qy
    dist = np.sqrt(best_d2)
    if dist >= r:
        return None
    if dist > 1e-12:
        n = np.array([(cx - bx) / dist, (cy - by) / dist])
    else:
        n = normals[face].copy()
    return np.array([bx, by]), n, r - dist


def _vertex_vs_shaft(a, b, r, verts):
    """Deepest polygon vertex pressing into the interior of segment ab.

    Endpoint contacts are handled by the endpoint circles; this only fires
    when the witness sits strictly inside the segment so a polygon corner
    cannot sneak between the endpoint spheres.
    """
    ax, ay = a[0], a[1]
    abx, aby = b[0] - ax, b[1] - ay
    denom = abx * abx + aby * aby
    if denom == 0.0:
        return None
    r2 = r * r
    best_d2 = np.inf
    bqx = bqy = bvx = bvy = 0.0
    for i in range(len(verts)):
        vx, vy = verts[i, 0], verts[i, 1]
        s = ((vx - ax) * abx + (vy - ay) * aby) / denom
        if not 0.02 < s < 0.98:
            continue
        qx, qy = ax + s * abx, ay + s * aby
        d2 = (vx - qx) ** 2 + (vy - qy) ** 2
        if d2 < best_d2:
            best_d2 = d2
            bqx, bqy, bvx, bvy = qx, qy, vx, vy
    if best_d2 >= r2:
        return None
    dist = np.sqrt(best_d2)
    if dist > 1e-12:
        n = np.array([(bqx - bvx) / dist, (bqy - bvy) / dist])
    else:
        n = np.array([0.0, 1.0])
    return np.array([bvx, bvy]), n, r - dist


def _capsule_circle(a, b, r_cap, c, r_circ):
    q = _closest_on_segment(c, a, b)
    return _circle_circle(q, r_cap, c, r_circ)


# -- contact gathering -----------------------------------------------------------


def _body_contacts(scene: Scene, geom) -> list[_Contact]:
    out = []
    bodies = scene.bodies
    for i in range(len(bodies)):
        for j in range(i + 1, len(bodies)):
            bi, bj = bodies[i], bodies[j]
            if bi.static and bj.static:
                continue
            gi, gj = geom[i], geom[j]
            dx = gi[3][0] - gj[3][0]
            dy = gi[3][1] - gj[3][1]
            reach = gi[2] + gj[2]
            if dx * dx + dy * dy > reach * reach:
                continue
            si, sj = bi.shape, bj.shape
            if isinstance(si, Circle) and isinstance(sj, Circle):
                hit = _circle_circle(bi.pose[:2], si.radius, bj.pose[:2], sj.radius)
                if hit:
                    p, n, pen = hit
                    out.append(_Contact(("cc", i, j), ("body", i), ("body", j), p, n, pen))
            elif isinstance(si, Circle):
                hit = _circle_polygon(bi.pose[:2], si.radius, gj[0], gj[1])
                if hit:
                    p, n, pen = hit
                    out.append(_Contact(("cp", i, j), ("body", i), ("body", j), p, n, pen))
            elif isinstance(sj, Circle):
                hit = _circle_polygon(bj.pose[:2], sj.radius, gi[0], gi[1])
                if hit:
                    p, n, pen = hit
                    out.append(_Contact(("cp", j, i), ("body", j), ("body", i), p, n, pen))
            else:
                out.extend(_polygon_polygon(i, j, gi, gj))
    return out


def _polygon_polygon(i: int, j: int, gi, gj) -> list[_Contact]:
    """Vertex-in-polygon contacts, both directions, one contact per vertex."""
    out = []
    vi, ni = gi[0], gi[1]
    vj, nj = gj[0], gj[1]
    for vidx in range(len(vi)):
        inside, depth, face = _deepest_face(vi[vidx], vj, nj)
        if inside:
            out.append(
                _Contact(("vb", i, vidx, j), ("body", i), ("body", j), vi[vidx], nj[face], depth)
            )
    for vidx in range(len(vj)):
        inside, depth, face = _deepest_face(vj[vidx], vi, ni)
        if inside:
            out.append(
                _Contact(("vb", j, vidx, i), ("body", j), ("body", i), vj[vidx], -ni[face], depth)
            )
    return out


def _finger_contacts(scene: Scene, joints_cache, geom) -> list[_Contact]:
    out = []
    for fi, finger in enumerate(scene.fingers):
        joints = joints_cache[fi]
        r = finger.chain.link_radius
        for li in range(finger.chain.n_joints):
            a, b = joints[li], joints[li + 1]
            mx, my = (a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0
            half = np.sqrt((b[0] - a[0]) ** 2 + (b[1] - a[1]) ** 2) / 2.0 + r
            for bi, body in enumerate(scene.bodies):
                g = geom[bi]
                dx, dy = mx - g[3][0], my - g[3][1]
                reach = half + g[2]
                if dx * dx + dy * dy > reach * reach:
                    continue
                party_a = ("finger", fi, li)
                party_b = ("body", bi)
                if isinstance(body.shape, Circle):
                    hit = _capsule_circle(a, b, r, body.pose[:2], body.shape.radius)
                    if hit:
                        p, n, pen = hit
                        out.append(_Contact(("fb", fi, li, bi, 0), party_a, party_b, p, n, pen))
                    continue
                verts, normals = g[0], g[1]
                for end_idx, end in ((0, a), (1, b)):
                    hit = _circle_polygon(end, r, verts, normals)
                    if hit:
                        p, n, pen = hit
                        out.append(
                            _Contact(("fb", fi, li, bi, end_idx), party_a, party_b, p, n, pen)
                        )
                hit = _vertex_vs_shaft(a, b, r, verts)
                if hit:
                    p, n, pen = hit
                    out.append(_Contact(("fb", fi, li, bi, 2), party_a, party_b, p, n, pen))
    return out


def _party_velocity(scene: Scene, party, p: np.ndarray, joints_cache) -> np.ndarray:
    if party[0] == "body":
        return scene.bodies[party[1]].point_velocity(p)
    _, fi, li = party
    finger = scene.fingers[fi]
    Jp = _point_jacobian(joints_cache[fi], p, li)
    return Jp @ finger.state.qdot


def _eval_contacts(scene: Scene, joints_cache):
    """Evaluate all contact forces for the current state.

    Returns (records, new_stretches) without mutating the scene; a record is
    (contact, force ContactForce, tangent, new_stretch).
    """
    params = scene.contact_params
    dt = scene.dt
    geom = [b.world_geometry() for b in scene.bodies]
    contacts = _body_contacts(scene, geom) + _finger_contacts(scene, joints_cache, geom)
    records = []
    new_stretches = {}
    for c in contacts:
        t = np.array([-c.normal[1], c.normal[0]])
        va = _party_velocity(scene, c.a, c.point, joints_cache)
        vb = _party_velocity(scene, c.b, c.point, joints_cache)
        vrel = va - vb
        pen_rate = -float(vrel @ c.normal)
        s = scene.stretches.get(c.key, 0.0) + float(vrel @ t) * dt
        f = contact_force(c.penetration, pen_rate, -s, params)
        if f.slipped and params.k_t > 0:
            s = -f.tangential / params.k_t
        new_stretches[c.key] = s
        records.append((c, f, t))
    return records, new_stretches


# -- sensing ---------------------------------------------------------------------


def sensor_origin(scene: Scene, finger_index: int, joints_cache=None) -> np.ndarray:
    finger = scene.fingers[finger_index]
    joints = (
        joints_cache[finger_index]
        if joints_cache is not None
        else joint_positions(finger.chain, finger.state.q)
    )
    return joints[finger.chain.sensor_link_index]


def _wrenches_from_records(scene: Scene, records, joints_cache) -> list[Wrench]:
    wrenches = [Wrench.zero() for _ in scene.fingers]
    for c, f, t in records:
        if c.a[0] != "finger":
            continue
        _, fi, li = c.a
        chain = scene.fingers[fi].chain
        if li < chain.sensor_link_index:
            continue
        fx = c.normal[0] * f.normal + t[0] * f.tangential
        fy = c.normal[1] * f.normal + t[1] * f.tangential
        origin = joints_cache[fi][chain.sensor_link_index]
        rx = c.point[0] - origin[0]
        ry = c.point[1] - origin[1]
        w = wrenches[fi]
        w.force[0] += fx
        w.force[1] += fy
        w.moment += rx * fy - ry * fx
    return wrenches


def sense_wrench(scene: Scene, finger_index: int) -> Wrench:
    """Object-on-finger wrench at the sensor origin for the current state.

    Equals the wrench that `step` would report for this state. Contacts on
    links proximal to the sensor, and handle forces, contribute nothing.
    """
    joints_cache = [joint_positions(f.chain, f.state.q) for f in scene.fingers]
    records, _ = _eval_contacts(scene, joints_cache)
    return _wrenches_from_records(scene, records, joints_cache)[finger_index]


# -- operator handle ---------------------------------------------------------------


def grip_link_index(chain: FingerChain) -> int:
    if chain.sensor_link_index < 1:
        raise ValueError("kinesthetic grip needs a link proximal to the sensor")
    return chain.sensor_link_index - 1


def grip_point(scene: Scene, finger_index: int, joints_cache=None) -> np.ndarray:
    finger = scene.fingers[finger_index]
    joints = (
        joints_cache[finger_index]
        if joints_cache is not None
        else joint_positions(finger.chain, finger.state.q)
    )
    gl = grip_link_index(finger.chain)
    return (joints[gl] + joints[gl + 1]) / 2.0


def apply_operator_handle(
    scene: Scene,
    finger_index: int,
    handle_target,
    handle_stiffness: float = HANDLE_STIFFNESS,
) -> Scene:
    """Attach (or move) the operator handle spring of one finger.

    The spring grips the midpoint of the link proximal to the sensor, so the
    sensed wrench never sees it. Returns a new scene.
    """
    if handle_stiffness <= 0:
        raise ValueError("handle_stiffness must be positive")
    new = scene.copy()
    grip_link_index(new.fingers[finger_index].chain)  # validates
    new.fingers[finger_index].handle = Handle(
        target=np.asarray(handle_target, dtype=float).copy(), stiffness=handle_stiffness
    )
    return new


def clear_handles(scene: Scene) -> Scene:
    new = scene.copy()
    for f in new.fingers:
        f.handle = None
    return new


# -- stepping ---------------------------------------------------------------------


def _advance(scene: Scene, torques=None, collect_wrenches: bool = True) -> list[Wrench] | None:
    """One physics substep, in place. Returns per-finger sensed wrenches."""
    nf = len(scene.fingers)
    if torques is None:
        torques = [np.zeros(f.chain.n_joints) for f in scene.fingers]
    if len(torques) != nf:
        raise ValueError(f"expected {nf} torque vectors, got {len(torques)}")
    joints_cache = [joint_positions(f.chain, f.state.q) for f in scene.fingers]

    records, new_stretches = _eval_contacts(scene, joints_cache)
    wrenches = _wrenches_from_records(scene, records, joints_cache) if collect_wrenches else None

    dt = scene.dt
    body_force = [np.zeros(2) for _ in scene.bodies]
    body_torque = [0.0 for _ in scene.bodies]
    finger_tau = []
    for fi, finger in enumerate(scene.fingers):
        tau_cmd = np.asarray(torques[fi], dtype=float)
        if tau_cmd.shape != (finger.chain.n_joints,):
            raise ValueError(
                f"finger {fi}: expected {finger.chain.n_joints} torques, got {tau_cmd.shape}"
            )
        if scene.finger_gravity_comp:
            tau = tau_cmd.astype(float).copy()  # compensation cancels gravity exactly
        else:
            tau = tau_cmd - gravity_vector(finger.chain, finger.state.q, scene.gravity)
        tau -= finger.chain.joint_damping * finger.state.qdot
        tau += np.asarray(finger.chain.joint_stiffness) * (
            np.asarray(finger.chain.joint_rest) - finger.state.q
        )
        finger_tau.append(tau)

    for c, f, t in records:
        force = c.normal * f.normal + t * f.tangential
        for party, sign in ((c.a, 1.0), (c.b, -1.0)):
            if party[0] == "body":
                body = scene.bodies[party[1]]
                if body.static:
                    continue
                body_force[party[1]] += sign * force
                r = c.point - body.pose[:2]
                body_torque[party[1]] += sign * float(r[0] * force[1] - r[1] * force[0])
            else:
                _, fi, li = party
                Jp = _point_jacobian(joints_cache[fi], c.point, li)
                finger_tau[fi] += sign * (Jp.T @ force)

    for fi, finger in enumerate(scene.fingers):
        if finger.handle is None:
            continue
        gp = grip_point(scene, fi, joints_cache)
        gl = grip_link_index(finger.chain)
        Jg = _point_jacobian(joints_cache[fi], gp, gl)
        vg = Jg @ finger.state.qdot
        damping = finger.handle.damping
        if damping is None:
            damping = 2.0 * np.sqrt(finger.handle.stiffness * 0.6)
        f_handle = finger.handle.stiffness * (finger.handle.target - gp) - damping * vg
        finger_tau[fi] += Jg.T @ f_handle

    for bi, body in enumerate(scene.bodies):
        if body.static:
            continue
        F = body_force[bi] + body.mass * scene.gravity
        if body.rail is not None:
            axis = body.rail.axis
            v_axis = float(body.velocity[:2] @ axis)
            v_star = v_axis + float(F @ axis) / body.mass * dt
            cap = body.rail.dry_friction * dt / body.mass
            if abs(v_star) <= cap:
                v_new = 0.0
            else:
                v_new = v_star - cap * np.sign(v_star)
            body.velocity[:2] = axis * v_new
            body.velocity[2] = 0.0
            body.pose[:2] = body.rail.origin + axis * (
                float((body.pose[:2] - body.rail.origin) @ axis) + v_new * dt
            )
        else:
            body.velocity[:2] += F / body.mass * dt
            body.velocity[2] += body_torque[bi] / body.inertia * dt
            body.pose[:2] += body.velocity[:2] * dt
            body.pose[2] += body.velocity[2] * dt

    scene.stretches = new_stretches
    scene.tick += 1

    for fi, finger in enumerate(scene.fingers):
        M = mass_matrix(finger.chain, finger.state.q, joints_cache[fi])
        qddot = np.linalg.solve(M, finger_tau[fi])
        finger.state.qdot += qddot * dt
        q_new = finger.state.q + finger.state.qdot * dt
        if not (np.all(np.isfinite(q_new)) and np.all(np.isfinite(finger.state.qdot))):
            raise SimulationDivergedError(scene.tick)
        clamped, hit = finger.chain.clamp_limits(q_new)
        if hit:
            finger.state.qdot[clamped != q_new] = 0.0
            finger.limit_clamped = True
        finger.state.q = clamped

    for body in scene.bodies:
        if not (np.all(np.isfinite(body.pose)) and np.all(np.isfinite(body.velocity))):
            raise SimulationDivergedError(scene.tick)
    return wrenches


def step(scene: Scene, torques=None) -> tuple[Scene, list[Wrench]]:
    """Advance one physics substep. Pure: returns (next scene, wrenches).

    The returned wrenches are the sensed object-on-finger wrenches evaluated
    at the *input* state, i.e. the contact forces this step integrates.
    """
    new = scene.copy()
    wrenches = _advance(new, torques)
    return new, wrenches


def run_substeps(scene: Scene, torques=None, n: int = SUBSTEPS_PER_TICK) -> tuple[Scene, list[Wrench]]:
    """Hold torques for n substeps (one control tick). Pure like `step`.

    The returned wrenches are those of the first substep, i.e. the sensed
    state at the tick boundary.
    """
    new = scene.copy()
    wrenches = _advance(new, torques)
    for _ in range(n - 1):
        _advance(new, torques, collect_wrenches=False)
    return new, wrenches


# -- rasterization -------------------------------------------------------------------

RASTER_STATIC = 0.4
RASTER_DYNAMIC = 0.8
RASTER_FINGER = 1.0


def render_raster(scene: Scene, width: int = 64, height: int = 64) -> np.ndarray:
    """Grayscale view of the scene, row-major, row 0 on top, values in [0, 1].

    Background 0, static bodies 0.4, dynamic bodies 0.8, finger links 1.0,
    with the camera fixed to the scene's view rectangle.
    """
    if width < 8 or height < 8:
        raise ValueError("raster must be at least 8x8")
    xmin, ymin, xmax, ymax = scene.view
    xs = xmin + (np.arange(width) + 0.5) * (xmax - xmin) / width
    ys = ymax - (np.arange(height) + 0.5) * (ymax - ymin) / height
    px = np.broadcast_to(xs[None, :], (height, width))
    py = np.broadcast_to(ys[:, None], (height, width))
    img = np.zeros((height, width))

    def paint_body(body: Body, value: float):
        if isinstance(body.shape, Circle):
            d2 = (px - body.pose[0]) ** 2 + (py - body.pose[1]) ** 2
            img[d2 <= body.shape.radius**2] = value
        else:
            verts = body.world_vertices()
            normals = body.world_normals()
            mask = np.ones((height, width), dtype=bool)
            for v, n in zip(verts, normals):
                mask &= (px - v[0]) * n[0] + (py - v[1]) * n[1] <= 0.0
            img[mask] = value

    for body in scene.bodies:
        if body.static:
            paint_body(body, RASTER_STATIC)
    for body in scene.bodies:
        if not body.static:
            paint_body(body, RASTER_DYNAMIC)
    for finger in scene.fingers:
        joints = joint_positions(finger.chain, finger.state.q)
        r2 = finger.chain.link_radius**2
        for li in range(finger.chain.n_joints):
            a, b = joints[li], joints[li + 1]
            ab = b - a
            denom = float(ab @ ab)
            tpar = ((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom
            tpar = np.clip(tpar, 0.0, 1.0)
            cx = a[0] + tpar * ab[0]
            cy = a[1] + tpar * ab[1]
            d2 = (px - cx) ** 2 + (py - cy) ** 2
            img[d2 <= r2] = RASTER_FINGER
    return img


def raster_to_bytes(img: np.ndarray) -> bytes:
    return np.round(img * 255.0).astype(np.uint8).tobytes()


def raster_from_bytes(data: bytes, width: int, height: int) -> np.ndarray:
    arr = np.frombuffer(data, dtype=np.uint8).reshape(height, width)
    return arr.astype(float) / 255.0
