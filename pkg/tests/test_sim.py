import numpy as np
import pytest

from dexforge.hand import FingerChain, JointState, forward_kinematics, gravity_vector, jacobian, joint_positions
from dexforge.sim import (
    Body,
    Circle,
    ContactParams,
    FingerSim,
    Polygon,
    Scene,
    SimulationDivergedError,
    Wrench,
    apply_operator_handle,
    box_inertia,
    circle_inertia,
    contact_force,
    grip_point,
    render_raster,
    run_substeps,
    sense_wrench,
    sensor_origin,
    step,
)


HOME_Q = (1.3, -0.9, -0.4)


def make_chain(base=(0.0, 0.27, -np.pi / 2)):
    """Canonical curled test finger: hyperextension stops, lumped tip mass."""
    lengths = (0.075, 0.065, 0.05)
    return FingerChain(
        link_lengths=lengths,
        link_masses=(0.12, 0.10, 0.08),
        link_com_offsets=tuple(l / 2 for l in lengths),
        joint_limits=((0.2, 2.6), (-2.6, -0.25), (-2.0, 1.2)),
        base_pose=base,
        joint_damping=(0.002, 0.01, 0.005),
        tip_mass=0.35,
    )


def finger_scene(q0=HOME_Q, bodies=(), gravity=(0.0, -9.81), params=None):
    chain = make_chain()
    return Scene(
        bodies=list(bodies),
        fingers=[FingerSim(chain=chain, state=JointState.rest(chain, np.array(q0)))],
        contact_params=params or ContactParams(),
        gravity=np.array(gravity),
    )


def static_floor(top=0.125, name="floor"):
    return Body(name=name, shape=Polygon.box(1.0, 0.1), pose=np.array([0.0, top - 0.05, 0.0]), static=True)


# -- contact law ---------------------------------------------------------------


def test_contact_force_separated():
    f = contact_force(-0.001, 0.0, 0.0, ContactParams())
    assert (f.normal, f.tangential) == (0.0, 0.0)


def test_contact_force_penalty_value():
    f = contact_force(0.001, 0.0, 0.0, ContactParams(k_n=1e4, c_n=0.0))
    assert f.normal == pytest.approx(10.0)


def test_contact_force_friction_cone_clamp():
    p = ContactParams(k_n=1e4, c_n=0.0, k_t=1e4, mu=0.5)
    f = contact_force(0.001, 0.0, 20.0 / p.k_t, p)
    assert f.normal == pytest.approx(10.0)
    assert f.tangential == pytest.approx(5.0)
    assert f.slipped


def test_contact_force_never_adhesive():
    p = ContactParams(k_n=1e4, c_n=1e5)
    f = contact_force(0.001, -2.0, 0.0, p)
    assert f.normal == 0.0
    assert f.tangential == 0.0


def test_contact_force_tangent_within_cone_sticks():
    p = ContactParams(k_n=1e4, c_n=0.0, k_t=1e3, mu=0.5)
    f = contact_force(0.002, 0.0, 0.004, p)
    assert f.tangential == pytest.approx(4.0)
    assert not f.slipped


# -- stepping basics ------------------------------------------------------------


def test_static_equilibrium_no_contact():
    scene = finger_scene()
    nxt, wr = step(scene, None)
    assert np.abs(nxt.fingers[0].state.q - scene.fingers[0].state.q).max() < 1e-12
    assert np.abs(nxt.fingers[0].state.qdot).max() < 1e-12
    assert wr[0].magnitude() == 0.0


def test_step_does_not_mutate_input():
    scene = finger_scene(gravity=(0.0, -9.81))
    scene.finger_gravity_comp = False  # raw gravity moves the copy, not the input
    q_before = scene.fingers[0].state.q.copy()
    step(scene, None)
    np.testing.assert_array_equal(scene.fingers[0].state.q, q_before)
    assert scene.tick == 0


def test_free_body_velocity_bit_exact():
    body = Body(
        name="ball", shape=Circle(0.02), mass=0.1, inertia=circle_inertia(0.1, 0.02),
        pose=np.array([0.0, 0.1, 0.0]), velocity=np.array([0.05, 0.02, 0.3]),
    )
    scene = Scene(bodies=[body], fingers=[], contact_params=ContactParams(), gravity=np.zeros(2))
    v0 = body.velocity.copy()
    for _ in range(1000):
        scene, _ = step(scene)
    np.testing.assert_array_equal(scene.bodies[0].velocity, v0)


def test_momentum_conserved_in_collision():
    p = ContactParams(k_n=500.0, c_n=0.0, k_t=0.0, mu=0.0)
    a = Body(name="a", shape=Circle(0.05), mass=0.5, inertia=circle_inertia(0.5, 0.05),
             pose=np.array([-0.04, 0.0, 0.0]), velocity=np.array([0.5, 0.0, 0.0]))
    b = Body(name="b", shape=Circle(0.05), mass=1.5, inertia=circle_inertia(1.5, 0.05),
             pose=np.array([0.04, 0.0, 0.0]), velocity=np.array([-0.1, 0.0, 0.0]))
    scene = Scene(bodies=[a, b], fingers=[], contact_params=p, gravity=np.zeros(2))
    for _ in range(300):
        before = sum(bd.mass * bd.velocity[:2] for bd in scene.bodies)
        scene, _ = step(scene)
        after = sum(bd.mass * bd.velocity[:2] for bd in scene.bodies)
        assert np.abs(after - before).max() < 1e-9


def test_determinism_bit_exact_trajectories():
    def run():
        scene = finger_scene(bodies=[static_floor()])
        states = []
        for k in range(60):
            scene = apply_operator_handle(scene, 0, [0.09 - 0.001 * k, 0.15])
            scene, wr = run_substeps(scene)
            states.append((scene.fingers[0].state.q.copy(), wr[0].force.copy(), wr[0].moment))
        return states

    s1, s2 = run(), run()
    for (q1, f1, m1), (q2, f2, m2) in zip(s1, s2):
        np.testing.assert_array_equal(q1, q2)
        np.testing.assert_array_equal(f1, f2)
        assert m1 == m2


def test_divergence_raises_with_tick():
    scene = finger_scene()
    with pytest.raises(SimulationDivergedError) as ei:
        step(scene, [np.array([1e308, 1e308, 1e308])])
    assert ei.value.tick == 1


# -- penalty contact through the full step ----------------------------------------


def penetrating_finger_scene(delta=0.001, params=None):
    """1-link finger tilted down so only its capsule tip penetrates the floor."""
    chain = FingerChain(
        link_lengths=(0.1,), link_masses=(0.3,), link_com_offsets=(0.05,),
        joint_limits=((-2.9, 2.9),), base_pose=(0.0, 0.05, 0.0), sensor_link_index=0,
    )
    # q = -30 deg puts the tip circle center exactly at y = 0
    floor = static_floor(top=-(chain.link_radius - delta))
    return Scene(
        bodies=[floor],
        fingers=[FingerSim(chain=chain, state=JointState.rest(chain, np.array([-np.pi / 6])))],
        contact_params=params or ContactParams(k_n=1e4, c_n=0.0, k_t=0.0, mu=0.0),
        gravity=np.zeros(2),
    )


def drive_handle_until_press(scene, force_min=1.0, ticks=240):
    """Servo the operator handle downward until the sensed press holds."""
    target = grip_point(scene, 0).copy()
    wr = [Wrench.zero()]
    for _ in range(ticks):
        if wr[0].force[1] < force_min:
            target[1] -= 0.0006
        scene = apply_operator_handle(scene, 0, target)
        scene, wr = run_substeps(scene)
    return scene, wr


def test_penalty_force_at_known_penetration():
    scene = penetrating_finger_scene(delta=0.001)
    w = sense_wrench(scene, 0)
    np.testing.assert_allclose(w.force, [0.0, 10.0], atol=1e-9)


def test_step_reports_same_wrench_as_sense():
    scene = penetrating_finger_scene(delta=0.002)
    w0 = sense_wrench(scene, 0)
    _, wr = step(scene, [np.zeros(1)])
    np.testing.assert_array_equal(wr[0].force, w0.force)
    assert wr[0].moment == w0.moment


def test_wrench_moment_cross_product_oracle():
    scene = penetrating_finger_scene(delta=0.001)
    w = sense_wrench(scene, 0)
    joints = joint_positions(scene.fingers[0].chain, scene.fingers[0].state.q)
    contact_point = np.array([joints[-1][0], scene.bodies[0].world_vertices()[:, 1].max()])
    r = contact_point - sensor_origin(scene, 0)
    expected = r[0] * w.force[1] - r[1] * w.force[0]
    assert w.moment == pytest.approx(expected, abs=1e-9)


def test_tangential_within_cone_every_step():
    # press into the floor, then drag sideways and watch the friction cone
    scene = finger_scene(bodies=[static_floor()], params=ContactParams(k_n=5e3, c_n=20.0, k_t=2e3, mu=0.4))
    scene, wr = drive_handle_until_press(scene, force_min=0.8)
    target = scene.fingers[0].handle.target.copy()
    saw_slip = False
    for k in range(90):
        target[0] -= 0.0008
        scene = apply_operator_handle(scene, 0, target)
        scene, wr = run_substeps(scene)
        fn = wr[0].force[1]
        ft = wr[0].force[0]
        if fn > 1e-6:
            assert abs(ft) <= 0.4 * fn + 1e-6
            if abs(abs(ft) - 0.4 * fn) < 0.05 * fn:
                saw_slip = True
    assert saw_slip


# -- sensing and the operator handle ------------------------------------------------


def test_no_contact_zero_wrench():
    scene = finger_scene()
    w = sense_wrench(scene, 0)
    assert np.all(w.force == 0.0) and w.moment == 0.0


def test_handle_forces_invisible_to_sensor():
    scene = finger_scene()
    scene = apply_operator_handle(scene, 0, [0.05, 0.2])
    for _ in range(30):
        scene, wr = run_substeps(scene)
        assert wr[0].magnitude() == 0.0
        assert wr[0].moment == 0.0


def test_handle_at_grip_point_is_neutral():
    scene = finger_scene()
    gp = grip_point(scene, 0)
    scene = apply_operator_handle(scene, 0, gp)
    nxt, _ = run_substeps(scene)
    assert np.abs(nxt.fingers[0].state.qdot).max() < 1e-9


def test_handle_static_balance_against_wall():
    # press the tip into a floor via the handle and check generalized statics
    scene = finger_scene(bodies=[static_floor()])
    scene, wr = drive_handle_until_press(scene, force_min=1.0, ticks=300)
    assert wr[0].force[1] > 0.8  # solid press
    assert np.abs(scene.fingers[0].state.qdot).max() < 1e-3  # settled
    finger = scene.fingers[0]
    joints = joint_positions(finger.chain, finger.state.q)
    gp = grip_point(scene, 0)
    f_handle = finger.handle.stiffness * (finger.handle.target - gp)
    from dexforge.hand import _point_jacobian

    Jg = _point_jacobian(joints, gp, finger.chain.sensor_link_index - 1)
    # contact force (object-on-finger) acts below the tip on the floor surface
    cp = np.array([joints[-1][0], 0.125])
    Jc = _point_jacobian(joints, cp, finger.chain.n_joints - 1)
    # gravity is compensated exactly, so handle and contact torques must cancel
    residual = Jg.T @ f_handle + Jc.T @ wr[0].force
    assert np.abs(residual).max() < 0.02 * max(1.0, np.abs(Jg.T @ f_handle).max())


# -- joint limits ----------------------------------------------------------------


def test_joint_limits_clamped_and_flagged():
    chain = FingerChain(
        link_lengths=(0.1,), link_masses=(0.2,), link_com_offsets=(0.05,),
        joint_limits=((-0.5, 0.5),), base_pose=(0.0, 0.0, 0.0),
    )
    scene = Scene(bodies=[], fingers=[FingerSim(chain=chain, state=JointState.rest(chain))],
                  contact_params=ContactParams(), gravity=np.zeros(2))
    for _ in range(600):
        scene, _ = step(scene, [np.array([0.5])])
    assert scene.fingers[0].state.q[0] == 0.5
    assert scene.fingers[0].state.qdot[0] == 0.0
    assert scene.fingers[0].limit_clamped


# -- energy sanity -----------------------------------------------------------------


def test_energy_drift_elastic_bounce():
    # gravity-free elastic bounce between two walls, frictionless and undamped
    k_n = 400.0
    params = ContactParams(k_n=k_n, c_n=0.0, k_t=0.0, mu=0.0)
    ball = Body(name="ball", shape=Circle(0.05), mass=1.0, inertia=circle_inertia(1.0, 0.05),
                pose=np.array([0.0, 0.0, 0.0]), velocity=np.array([1.0, 0.0, 0.0]))
    left = Body(name="wl", shape=Polygon.box(0.1, 1.0), pose=np.array([-0.8, 0.0, 0.0]), static=True)
    right = Body(name="wr", shape=Polygon.box(0.1, 1.0), pose=np.array([0.8, 0.0, 0.0]), static=True)
    scene = Scene(bodies=[ball, left, right], fingers=[], contact_params=params, gravity=np.zeros(2))

    def energy(s):
        b = s.bodies[0]
        e = 0.5 * b.mass * float(b.velocity[:2] @ b.velocity[:2])
        for face_x, sign in ((-0.75, 1.0), (0.75, -1.0)):
            pen = 0.05 - sign * (b.pose[0] - face_x)
            if pen > 0:
                e += 0.5 * k_n * pen * pen
        return e

    e0 = energy(scene)
    for _ in range(600):
        scene, _ = step(scene)
    assert abs(energy(scene) - e0) / e0 < 0.01


# -- polygon stacking ----------------------------------------------------------------


def test_box_settles_on_floor():
    # light bodies need contact params inside the explicit-integration envelope
    box = Body(name="box", shape=Polygon.box(0.05, 0.035), mass=0.12,
               inertia=box_inertia(0.12, 0.05, 0.035),
               pose=np.array([0.0, 0.07 + 0.0175, 0.0]))
    scene = Scene(bodies=[box, static_floor(0.07)], fingers=[],
                  contact_params=ContactParams(k_n=3e3, c_n=8.0, k_t=1.5e3, mu=0.6),
                  gravity=np.array([0.0, -9.81]))
    for _ in range(1200):
        scene, _ = step(scene)
    b = scene.bodies[0]
    assert abs(b.pose[0]) < 1e-4  # no sideways drift
    assert abs(b.pose[2]) < 1e-4  # stays level
    assert abs(b.velocity[:2] @ b.velocity[:2]) < 1e-6
    # rests just below the float height by the static penetration
    expected_pen = 0.12 * 9.81 / (2 * 3e3)  # two corner springs share the weight
    assert b.pose[1] == pytest.approx(0.07 + 0.0175 - expected_pen, abs=2e-4)


# -- rasterization -------------------------------------------------------------------


def test_raster_empty_scene():
    scene = Scene(bodies=[], fingers=[], contact_params=ContactParams(), gravity=np.zeros(2))
    img = render_raster(scene, 64, 64)
    assert img.shape == (64, 64)
    assert np.all(img == 0.0)


def test_raster_full_cover_box():
    box = Body(name="big", shape=Polygon.box(10.0, 10.0), mass=1.0,
               inertia=box_inertia(1.0, 10, 10), pose=np.zeros(3))
    scene = Scene(bodies=[box], fingers=[], contact_params=ContactParams(),
                  gravity=np.zeros(2), view=(-0.2, -0.2, 0.2, 0.2))
    assert np.all(render_raster(scene, 16, 16) == 0.8)


def test_raster_deterministic_and_layered():
    scene = finger_scene(bodies=[static_floor()])
    a = render_raster(scene, 64, 64)
    b = render_raster(scene, 64, 64)
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 0.4, 0.8, 1.0}
    assert (a == 1.0).any() and (a == 0.4).any()


def test_raster_rejects_tiny():
    scene = Scene(bodies=[], fingers=[], contact_params=ContactParams(), gravity=np.zeros(2))
    with pytest.raises(ValueError):
        render_raster(scene, 4, 64)
