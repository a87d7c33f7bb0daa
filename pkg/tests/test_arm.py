import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from corridor_mpc.arm import (
    ArmModel, ArmParams, DiscreteDynamics, State, UncertaintySet,
    coriolis_matrix, eval_dynamics, feedback_linearize, forward_dynamics,
    mass_matrix, step_true,
)
from corridor_mpc.bounds import eval_delta


def com_positions(p, q):
    """Independent forward kinematics, loop form; works for complex q."""
    pts = []
    base = np.zeros(2, dtype=complex)
    phi = 0.0
    for i in range(p.dof):
        phi = phi + q[i]
        u = np.array([np.cos(phi), np.sin(phi)])
        pts.append(base + p.com_offsets[i] * u)
        base = base + p.link_lengths[i] * u
    return pts


def kinetic_energy(p, q, qd, h=1e-30):
    # complex-step directional derivative gives exact COM velocities
    pos = com_positions(p, q + 1j * h * qd)
    T = 0.0
    for i in range(p.dof):
        v = pos[i].imag / h
        omega = qd[: i + 1].sum()
        T += 0.5 * p.link_masses[i] * v @ v + 0.5 * p.link_inertias[i] * omega**2
    return T


def potential(p, q):
    return sum(p.link_masses[i] * p.gravity_accel * com_positions(p, q)[i][1].real for i in range(p.dof))


def mass_matrix_oracle(p, q):
    n = p.dof
    E = np.eye(n)
    M = np.empty((n, n))
    for k in range(n):
        for l in range(n):
            # polarization of the quadratic form T = 1/2 qd' M qd
            M[k, l] = (kinetic_energy(p, q, E[k] + E[l]) - kinetic_energy(p, q, E[k])
                       - kinetic_energy(p, q, E[l]))
    return M


@pytest.fixture(params=[2, 3])
def arm(request):
    return ArmParams.planar(request.param)


def test_mass_matrix_matches_lagrangian_oracle(arm):
    rng = np.random.default_rng(0)
    for _ in range(20):
        q = rng.uniform(-np.pi, np.pi, arm.dof)
        np.testing.assert_allclose(mass_matrix(arm, q), mass_matrix_oracle(arm, q), atol=1e-8)


def test_gravity_matches_potential_gradient(arm):
    p = ArmParams(arm.link_masses, arm.link_lengths, arm.com_offsets, arm.link_inertias,
                  arm.damping_diag, gravity_accel=9.81)
    rng = np.random.default_rng(1)
    model = ArmModel(p)
    for _ in range(10):
        q = rng.uniform(-np.pi, np.pi, p.dof)
        h = 1e-6
        grad = [(potential(p, q + h * e) - potential(p, q - h * e)) / (2 * h) for e in np.eye(p.dof)]
        _, _, g = eval_dynamics(model, False, State.rest(q))
        np.testing.assert_allclose(g, grad, atol=1e-6)


def test_zero_velocity_zero_gravity(arm):
    model = ArmModel(arm)
    M, C, g = eval_dynamics(model, False, State.rest(np.zeros(arm.dof)))
    np.testing.assert_array_equal(g, 0.0)
    np.testing.assert_allclose(C, np.diag(arm.damping_diag))
    assert np.all(np.linalg.eigvalsh(M) > 0)


def test_coriolis_vanishes_at_rest(arm):
    rng = np.random.default_rng(2)
    q = rng.uniform(-3, 3, (50, arm.dof))
    np.testing.assert_array_equal(coriolis_matrix(arm, q, np.zeros_like(q)), 0.0)


def test_skew_symmetry_of_mdot_minus_2c(arm):
    rng = np.random.default_rng(3)
    for _ in range(20):
        q = rng.uniform(-np.pi, np.pi, arm.dof)
        qd = rng.uniform(-2, 2, arm.dof)
        h = 1e-6
        Mdot = (mass_matrix(arm, q + h * qd) - mass_matrix(arm, q - h * qd)) / (2 * h)
        S = Mdot - 2 * coriolis_matrix(arm, q, qd)
        np.testing.assert_allclose(S + S.T, 0.0, atol=1e-5)


def test_mass_matrix_positive_definite_true_and_nominal(arm):
    rng = np.random.default_rng(4)
    unc = UncertaintySet.masses_and_damping(arm.dof, 0.05, scale=2.0)
    q = rng.uniform(-np.pi, np.pi, (200, arm.dof))
    for theta in unc.vertices():
        p = ArmModel(arm, theta).true_params
        assert np.all(np.linalg.eigvalsh(mass_matrix(p, q)) > 0)
    assert np.all(np.linalg.eigvalsh(mass_matrix(arm, q)) > 0)


def test_true_equals_nominal_bitwise_at_zero_theta(arm):
    model = ArmModel(arm)
    s = State([0.3, -0.2, 0.1][: arm.dof], [0.5, 1.0, -1.0][: arm.dof])
    for a, b in zip(eval_dynamics(model, True, s), eval_dynamics(model, False, s)):
        assert np.array_equal(a, b)


def test_feedback_linearize_zero():
    model = ArmModel(ArmParams.planar(2))
    np.testing.assert_array_equal(feedback_linearize(model, State.rest([0.4, 1.0]), [0, 0]), 0.0)


def test_feedback_linearize_rejects_bad_dimension():
    model = ArmModel(ArmParams.planar(2))
    with pytest.raises(ValueError):
        feedback_linearize(model, State.rest([0.0, 0.0]), [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        eval_dynamics(model, False, State([np.nan, 0.0], [0.0, 0.0]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=6, max_size=6))
def test_exact_cancellation_without_uncertainty(vals):
    model = ArmModel(ArmParams.planar(2))
    s = State(vals[:2], np.clip(vals[2:4], -2, 2))
    a = np.array(vals[4:]) * 5
    qdd = forward_dynamics(model, s, feedback_linearize(model, s, a))
    np.testing.assert_allclose(qdd, a, atol=1e-10)


def test_residual_matches_eval_delta():
    arm = ArmParams.planar(3)
    unc = UncertaintySet.masses_and_damping(3, 0.05, scale=2.0)
    rng = np.random.default_rng(5)
    for _ in range(50):
        model = ArmModel(arm, unc.sample(rng))
        s = State(rng.uniform(-3, 3, 3), rng.uniform(-2, 2, 3))
        a = rng.uniform(-20, 20, 3)
        qdd = forward_dynamics(model, s, feedback_linearize(model, s, a))
        np.testing.assert_allclose(qdd - a, eval_delta(model, s, a), atol=1e-10)


def test_step_true_steady_state_and_double_integrator():
    model = ArmModel(ArmParams.planar(2))
    dyn = DiscreteDynamics.double_integrator(2, 0.01)
    s = State.rest([0.2, -0.4])
    s1 = step_true(model, dyn, s, [0.0, 0.0])
    np.testing.assert_array_equal(s1.x, s.x)
    a = np.array([1.5, -2.0])
    x = s.x
    for _ in range(25):
        s = step_true(model, dyn, s, a)
        x = dyn.A @ x + dyn.B @ a
    np.testing.assert_allclose(s.x, x, atol=1e-10)


def _euler_vs_rk4(dt, a_max, v_max, n=40, seed=6):
    arm = ArmParams.planar(2)
    unc = UncertaintySet.masses_and_damping(2, 0.05)
    rng = np.random.default_rng(seed)
    dyn = DiscreteDynamics.double_integrator(2, dt)
    worst = np.zeros(4)
    for _ in range(n):
        model = ArmModel(arm, unc.sample(rng))
        s = State(rng.uniform(-3, 3, 2), rng.uniform(-v_max, v_max, 2))
        a = rng.uniform(-a_max, a_max, 2)
        u = feedback_linearize(model, s, a)

        def f(x):
            st_ = State.from_vector(x)
            return np.concatenate([st_.qd, forward_dynamics(model, st_, u)])

        x = s.x
        k1 = f(x)
        k2 = f(x + dt / 2 * k1)
        k3 = f(x + dt / 2 * k2)
        k4 = f(x + dt * k3)
        x_rk4 = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        worst = np.maximum(worst, np.abs(step_true(model, dyn, s, a).x - x_rk4))
    return worst


def test_step_true_close_to_rk4_of_continuous_dynamics():
    # the O(dt^2) constant is half the jerk; 10 covers |a| <= 2, |qd| <= 1
    dt = 0.01
    assert np.all(_euler_vs_rk4(dt, a_max=2.0, v_max=1.0) <= 10 * dt**2)


def test_step_true_error_is_second_order_over_full_envelope():
    e1 = _euler_vs_rk4(0.01, 20.0, 2.0).max()
    e2 = _euler_vs_rk4(0.005, 20.0, 2.0).max()
    assert 3.5 < e1 / e2 < 4.5


def test_forward_euler_variant():
    dyn = DiscreteDynamics.double_integrator(2, 0.01, zoh=False)
    np.testing.assert_array_equal(dyn.B[:2], 0.0)
    np.testing.assert_allclose(dyn.A[:2, 2:], 0.01 * np.eye(2))


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        ArmParams([1.0, -1.0], [1, 1], [0.5, 0.5], [0.1, 0.1], [0.2, 0.2])
    with pytest.raises(ValueError):
        ArmParams([1.0, 1.0], [1, 1], [0.5, 1.5], [0.1, 0.1], [0.2, 0.2])
