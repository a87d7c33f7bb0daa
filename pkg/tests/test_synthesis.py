import numpy as np
import pytest

from corridor_mpc.arm import ArmModel, DiscreteDynamics, State, step_true
from corridor_mpc.bounds import ErrorBoundConstants, error_matrices
from corridor_mpc.synthesis import (
    SynthesisConfig, SynthesisError, TubeController, certified_rate, derive_constants,
    recover_gain, select_candidate, sym_inv_sqrt, synthesize, tube_step,
)
from oracles import ellipsoid_samples

ZERO = ErrorBoundConstants(0.0, 0.0, 0.0)


def test_contraction_certificate_every_candidate(offline):
    for c in offline.pool:
        assert c.contraction_residual(offline.dyn) >= -1e-8
    assert offline.flex.contraction_residual(offline.dyn) >= -1e-8


def test_contraction_on_random_vectors(offline):
    c = offline.flex
    rng = np.random.default_rng(0)
    x = rng.normal(size=(10_000, 4))
    Acl = offline.dyn.A + offline.dyn.B @ c.K
    assert np.all(c.p_norm(x @ Acl.T) <= c.rho * c.p_norm(x) * (1 + 1e-12))


def test_single_solve_residual_and_rate(offline):
    sol = synthesize(offline.cfg, offline.dyn, 0.9)
    P, K = recover_gain(sol)
    # the raw solver pair contracts at the requested rate up to solver tolerance
    assert certified_rate(P, K, offline.dyn) <= 0.9 + 1e-6


def test_zero_disturbance_gives_zero_w(offline):
    cfg = SynthesisConfig(np.array([0.9]), offline.cfg.A_x, offline.cfg.b_x, offline.cfg.A_u,
                          offline.cfg.b_u, np.zeros(4), offline.cfg.norm_x, offline.cfg.norm_u)
    sol = synthesize(cfg, offline.dyn, 0.9)
    assert abs(sol.w2) <= 1e-7


def test_tightenings_match_closed_form(offline):
    sol = synthesize(offline.cfg, offline.dyn, 0.9)
    P, K = recover_gain(sol)
    Pih = sym_inv_sqrt(P)
    cx = np.linalg.norm((offline.cfg.A_x / offline.cfg.norm_x[:, None]) @ Pih, axis=1)
    cu = np.linalg.norm((offline.cfg.A_u / offline.cfg.norm_u[:, None]) @ K @ Pih, axis=1)
    # the SDP epigraph variables are tight at the optimum
    np.testing.assert_allclose(np.sqrt(sol.cx2), cx, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(np.sqrt(sol.cu2), cu, rtol=1e-6, atol=1e-9)


def test_derived_constants_without_uncertainty(offline):
    c = offline.flex
    z = derive_constants(c.P, c.K, offline.dyn, ZERO, rho=c.rho, A_x=offline.cfg.A_x, A_u=offline.cfg.A_u)
    assert z.L_beta == 0 and z.rho_tilde == z.rho and z.delta_f == 0


def test_projection_radius_block_diagonal():
    dyn = DiscreteDynamics.double_integrator(2)
    P = np.diag([4.0, 9.0, 1.0, 2.0])
    c = derive_constants(P, np.zeros((2, 4)), dyn, ZERO, rho=0.9, A_x=np.eye(4), A_u=np.eye(2))
    assert np.isclose(c.r_p, 1 / np.sqrt(4.0))
    c = derive_constants(np.eye(4), np.zeros((2, 4)), dyn, ZERO, rho=0.9, A_x=np.eye(4), A_u=np.eye(2))
    assert np.isclose(c.r_p, 1.0)


def test_projection_soundness(offline):
    c = offline.flex
    rng = np.random.default_rng(1)
    delta = 0.7
    e = ellipsoid_samples(c.P, delta, 100_000, rng)
    assert np.all(np.linalg.norm(e[:, :2], axis=1) <= delta * c.r_p * (1 + 1e-12))


def test_tightening_soundness(offline):
    c = offline.flex
    rng = np.random.default_rng(2)
    delta = 0.5
    e = ellipsoid_samples(c.P, delta, 50_000, rng)
    # sampled maxima never exceed the closed form, and the analytic maximizer attains it
    assert np.all((e @ offline.cfg.A_x.T).max(axis=0) <= c.tightening_x * delta * (1 + 1e-12))
    assert np.all((e @ (offline.cfg.A_u @ c.K).T).max(axis=0) <= c.tightening_u * delta * (1 + 1e-12))
    for i, row in enumerate(offline.cfg.A_x):
        v = np.linalg.solve(c.P, row)
        e_star = delta * v / np.sqrt(row @ v)
        assert np.isclose(row @ e_star, c.tightening_x[i] * delta)
        assert np.isclose(c.p_norm(e_star), delta)


def test_tube_step_soundness(offline):
    c, consts = offline.flex, offline.consts
    rng = np.random.default_rng(3)
    n = 100_000
    theta = offline.unc.sample(rng, n)
    q_bar, qd_bar = offline.X.sample(rng, n)
    qd_bar *= 0.8
    a_bar = rng.uniform(-1, 1, (n, 2)) * offline.accel.box_halfwidth * 0.5
    delta = rng.uniform(0, 0.5, n)
    x_bar = np.hstack([q_bar, qd_bar])
    e = ellipsoid_samples(c.P, 1.0, n, rng) * delta[:, None]
    x = x_bar + e
    a = a_bar + e @ c.K.T
    # Prop-1 bounds hold on X x A only; keep samples inside that domain
    keep = offline.X.contains(x) & np.all(np.abs(a) <= offline.accel.box_halfwidth, axis=1)
    assert keep.mean() > 0.9
    x, x_bar, a, a_bar, theta, delta = x[keep], x_bar[keep], a[keep], a_bar[keep], theta[keep], delta[keep]
    Mt, Ct, gt = error_matrices(offline.arm, theta, x[:, :2], x[:, 2:])
    Delta = np.einsum("nkl,nl->nk", Mt, a) + np.einsum("nkl,nl->nk", Ct, x[:, 2:]) + gt
    A, B = offline.dyn.A, offline.dyn.B
    x_next = x @ A.T + (a + Delta) @ B.T
    xb_next = x_bar @ A.T + a_bar @ B.T
    bound = c.rho_tilde * delta + c.d * consts.beta(x_bar[:, 2:], a_bar)
    assert np.all(c.p_norm(x_next - xb_next) <= bound)
    # the batched step agrees with the single-state simulator
    for i in range(20):
        model = ArmModel(offline.arm, theta[i])
        s1 = step_true(model, offline.dyn, State.from_vector(x[i]), a[i])
        np.testing.assert_allclose(s1.x, x_next[i], atol=1e-12)


def test_tube_step_fixed_point_and_decay(offline):
    c = offline.flex
    rest = np.zeros(4)
    assert tube_step(c, c.delta_f, rest, np.zeros(2), offline.consts) == pytest.approx(c.delta_f, abs=1e-12)
    d = 1.0
    for _ in range(50):
        nxt = tube_step(c, d, rest, np.zeros(2), offline.consts)
        assert c.delta_f <= nxt < d
        d = nxt
    with pytest.raises(ValueError):
        tube_step(c, -1.0, rest, np.zeros(2), offline.consts)


def test_tube_step_fixed_point_with_gravity_offset(offline):
    c = offline.flex
    consts = ErrorBoundConstants(offline.consts.a, offline.consts.b, 0.05)
    ctrl = derive_constants(c.P, c.K, offline.dyn, consts, rho=c.rho, A_x=offline.cfg.A_x, A_u=offline.cfg.A_u)
    assert ctrl.delta_f > 0
    assert abs(tube_step(ctrl, ctrl.delta_f, np.zeros(4), np.zeros(2), consts) - ctrl.delta_f) <= 1e-12


def test_single_grid_point_returned(offline):
    cfg = SynthesisConfig(np.array([0.9]), offline.cfg.A_x, offline.cfg.b_x, offline.cfg.A_u,
                          offline.cfg.b_u, offline.cfg.w_halfwidth, offline.cfg.norm_x, offline.cfg.norm_u)
    c = select_candidate(cfg, offline.dyn, offline.consts, "flexible")
    assert c.provenance["rho_grid"] == 0.9


def test_doubling_constants_raises_rho_tilde(offline):
    c2 = ErrorBoundConstants(2 * offline.consts.a, 2 * offline.consts.b, 2 * offline.consts.c)
    cfg2 = SynthesisConfig.build(offline.X, offline.accel, offline.dyn, c2)
    sel2 = select_candidate(cfg2, offline.dyn, c2, "flexible")
    assert sel2.rho_tilde >= offline.flex.rho_tilde


def test_selection_deterministic(offline):
    again = select_candidate(offline.cfg, offline.dyn, offline.consts, "flexible")
    np.testing.assert_array_equal(again.P, offline.flex.P)
    assert again.rho == offline.flex.rho


def test_flexible_rejects_noncontracting_candidates(offline):
    bad = [c for c in offline.pool if not c.valid]
    with pytest.raises(SynthesisError, match="no valid controller"):
        select_candidate(offline.cfg, offline.dyn, offline.consts, "flexible", pool=bad or [])
    if bad:
        # rigid mode ignores the rho_tilde condition
        assert select_candidate(offline.cfg, offline.dyn, offline.consts, "rigid", pool=bad) in bad


def test_invalid_rho_rejected(offline):
    with pytest.raises(ValueError):
        synthesize(offline.cfg, offline.dyn, 1.2)
    with pytest.raises(ValueError):
        SynthesisConfig(np.array([1.0]), offline.cfg.A_x, offline.cfg.b_x, offline.cfg.A_u,
                        offline.cfg.b_u, offline.cfg.w_halfwidth, offline.cfg.norm_x, offline.cfg.norm_u)


def test_controller_roundtrip(offline):
    c = TubeController.from_dict(offline.flex.to_dict())
    np.testing.assert_array_equal(c.P, offline.flex.P)
    assert c.rho_tilde == offline.flex.rho_tilde and c.provenance == offline.flex.provenance
