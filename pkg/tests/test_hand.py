import numpy as np
import pytest

from dexforge.hand import (
    DimensionError,
    FingerChain,
    forward_kinematics,
    gravity_vector,
    jacobian,
    joint_positions,
    link_com_positions,
    mass_matrix,
    solve_ik,
)


def two_link(l1=0.1, l2=0.1, base=(0.0, 0.0, 0.0)):
    return FingerChain(
        link_lengths=(l1, l2),
        link_masses=(0.05, 0.04),
        link_com_offsets=(l1 / 2, l2 / 2),
        joint_limits=((-np.pi, np.pi), (-np.pi, np.pi)),
        base_pose=base,
    )


def random_chain(rng, n_links=None):
    n = n_links or rng.integers(1, 4)
    lengths = tuple(rng.uniform(0.03, 0.15, n))
    return FingerChain(
        link_lengths=lengths,
        link_masses=tuple(rng.uniform(0.01, 0.5, n)),
        link_com_offsets=tuple(L * rng.uniform(0.2, 0.8) for L in lengths),
        joint_limits=tuple((-2 * np.pi, 2 * np.pi) for _ in range(n)),
        base_pose=tuple(rng.uniform(-0.2, 0.2, 3)),
    )


# -- independent oracles ----------------------------------------------------

def fk_oracle(chain, q):
    """Trigonometric accumulation, written independently of joint_positions."""
    x, y, angle = chain.base_pose
    for qi, L in zip(q, chain.link_lengths):
        angle = angle + qi
        x = x + L * np.cos(angle)
        y = y + L * np.sin(angle)
    return np.array([x, y])


def fd_jacobian(chain, q, h=1e-6):
    n = len(q)
    J = np.zeros((2, n))
    for i in range(n):
        dq = np.zeros(n)
        dq[i] = h
        J[:, i] = (forward_kinematics(chain, q + dq) - forward_kinematics(chain, q - dq)) / (2 * h)
    return J


def potential(chain, q, g):
    coms = link_com_positions(chain, q)
    return sum(m * float(np.dot(g, c)) for m, c in zip(chain.link_masses, coms))


def fd_gravity(chain, q, g, h=1e-6):
    n = len(q)
    tau = np.zeros(n)
    for i in range(n):
        dq = np.zeros(n)
        dq[i] = h
        tau[i] = -(potential(chain, q + dq, g) - potential(chain, q - dq, g)) / (2 * h)
    return tau


# -- forward kinematics ------------------------------------------------------

def test_fk_extended():
    np.testing.assert_allclose(forward_kinematics(two_link(), [0, 0]), [0.2, 0.0], atol=1e-12)


def test_fk_rotated_straight():
    np.testing.assert_allclose(
        forward_kinematics(two_link(), [np.pi / 2, 0]), [0.0, 0.2], atol=1e-12
    )


def test_fk_matches_accumulation_oracle():
    chain = two_link()
    q = np.array([np.pi / 4, np.pi / 4])
    np.testing.assert_allclose(forward_kinematics(chain, q), fk_oracle(chain, q), atol=1e-12)


def test_fk_random_chains_match_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        chain = random_chain(rng)
        q = rng.uniform(-np.pi, np.pi, chain.n_joints)
        np.testing.assert_allclose(forward_kinematics(chain, q), fk_oracle(chain, q), atol=1e-12)


def test_fk_invariant_under_full_turns():
    rng = np.random.default_rng(1)
    chain = random_chain(rng, 3)
    q = rng.uniform(-1, 1, 3)
    for i in range(3):
        shifted = q.copy()
        shifted[i] += 2 * np.pi
        np.testing.assert_allclose(
            forward_kinematics(chain, shifted), forward_kinematics(chain, q), atol=1e-9
        )


def test_fk_dimension_mismatch():
    with pytest.raises(DimensionError):
        forward_kinematics(two_link(), [0.0])


# -- jacobian -----------------------------------------------------------------

def test_jacobian_one_link_analytic():
    chain = FingerChain(
        link_lengths=(0.1,),
        link_masses=(0.05,),
        link_com_offsets=(0.05,),
        joint_limits=((-np.pi, np.pi),),
    )
    np.testing.assert_allclose(jacobian(chain, [0.0]), [[0.0], [0.1]], atol=1e-12)


def test_jacobian_two_link_analytic():
    np.testing.assert_allclose(
        jacobian(two_link(), [0.0, 0.0]), [[0.0, 0.0], [0.2, 0.1]], atol=1e-12
    )


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(100):
        chain = random_chain(rng)
        q = rng.uniform(-np.pi, np.pi, chain.n_joints)
        J = jacobian(chain, q)
        J_fd = fd_jacobian(chain, q)
        scale = max(np.abs(J_fd).max(), 1e-9)
        assert np.abs(J - J_fd).max() / scale < 1e-6


# -- gravity ------------------------------------------------------------------

def test_gravity_zero_masses():
    chain = FingerChain(
        link_lengths=(0.1, 0.1),
        link_masses=(0.0, 0.0),
        link_com_offsets=(0.05, 0.05),
        joint_limits=((-np.pi, np.pi),) * 2,
    )
    np.testing.assert_allclose(gravity_vector(chain, [0.3, -0.2], (0, -9.81)), [0, 0], atol=1e-15)


def test_gravity_single_link_statics():
    chain = FingerChain(
        link_lengths=(0.1,),
        link_masses=(0.05,),
        link_com_offsets=(0.05,),
        joint_limits=((-np.pi, np.pi),),
    )
    tau = gravity_vector(chain, [0.0], (0, -9.81))
    np.testing.assert_allclose(tau, [0.05 * 9.81 * 0.05], rtol=1e-12)


def test_gravity_matches_potential_gradient():
    rng = np.random.default_rng(3)
    g = np.array([0.0, -9.81])
    for _ in range(100):
        chain = random_chain(rng)
        q = rng.uniform(-np.pi, np.pi, chain.n_joints)
        tau = gravity_vector(chain, q, g)
        tau_fd = fd_gravity(chain, q, g)
        scale = max(np.abs(tau_fd).max(), 1e-9)
        assert np.abs(tau - tau_fd).max() / scale < 1e-6


# -- mass matrix ---------------------------------------------------------------

def test_mass_matrix_spd():
    rng = np.random.default_rng(4)
    for _ in range(20):
        chain = random_chain(rng)
        q = rng.uniform(-np.pi, np.pi, chain.n_joints)
        M = mass_matrix(chain, q)
        np.testing.assert_allclose(M, M.T, atol=1e-12)
        assert np.all(np.linalg.eigvalsh(M) > 0)


# -- inverse kinematics ---------------------------------------------------------

def test_ik_fixed_point():
    chain = two_link()
    q_seed = np.array([0.4, -0.7])
    res = solve_ik(chain, forward_kinematics(chain, q_seed), q_seed)
    assert res.converged
    assert res.iterations == 0
    np.testing.assert_array_equal(res.q, q_seed)


def test_ik_extended_solution():
    res = solve_ik(two_link(), [0.2, 0.0], np.array([0.3, 0.2]))
    assert res.converged
    np.testing.assert_allclose(forward_kinematics(two_link(), res.q), [0.2, 0.0], atol=1e-4)


def test_ik_random_round_trip():
    rng = np.random.default_rng(5)
    chain = two_link(0.08, 0.07)
    for _ in range(50):
        q_true = rng.uniform(-1.5, 1.5, 2)
        target = forward_kinematics(chain, q_true)
        res = solve_ik(chain, target, q_seed=rng.uniform(-0.5, 0.5, 2), max_iters=200)
        assert res.converged, f"IK failed for target {target}"
        assert np.linalg.norm(forward_kinematics(chain, res.q) - target) <= 1e-4


def test_ik_unreachable_returns_best_effort():
    res = solve_ik(two_link(), [0.5, 0.5], np.zeros(2), max_iters=50)
    assert not res.converged
    assert res.error > 0


# -- construction guards ---------------------------------------------------------

def test_chain_rejects_bad_fields():
    with pytest.raises(ValueError):
        FingerChain((0.0,), (0.1,), (0.0,), ((-1, 1),))
    with pytest.raises(ValueError):
        FingerChain((0.1,), (0.1,), (0.05,), ((1, -1),))
    with pytest.raises(ValueError):
        FingerChain((0.1,), (0.1,), (0.05,), ((-1, 1),), sensor_link_index=3)


def test_joint_position_chain_shape():
    chain = two_link()
    pts = joint_positions(chain, [0.1, 0.2])
    assert pts.shape == (3, 2)
    np.testing.assert_allclose(pts[0], [0.0, 0.0])
