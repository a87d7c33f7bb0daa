import numpy as np
import pytest

from corridor_mpc.config import ProjectConfig, build_artifacts
from corridor_mpc.corridor import assign_balls, build_corridor, plan_path, select_virtual_goal
from corridor_mpc.geometry import Scene, scdf
from corridor_mpc.mpc import MpcConfig, TubeMpc
from corridor_mpc.sim import (
    CSV_FIELDS, ProblemInstance, RunConfig, SimTrace, audit_trace, generate_instance, run_benchmark, run_episode,
    straight_line_clear, summarize, theta_from_seed,
)


@pytest.fixture(scope="module")
def art():
    return build_artifacts(ProjectConfig(n_validation=20_000), 1.0)


@pytest.fixture(scope="module")
def instance(art):
    return generate_instance(0, art.geom)


def test_goal_equals_start_reaches_in_zero_steps(art):
    q = np.array([0.4, -0.3])
    inst = ProblemInstance(Scene(), q, q, 0)
    tr = run_episode(inst, RunConfig(), art, theta_from_seed(art.unc, 0))
    assert tr.outcome == "reached" and tr.steps == 0 and tr.solves == []


def test_oracle_matches_predictions(art):
    inst = ProblemInstance(Scene(), np.array([0.0, 0.5]), np.array([0.3, 0.2]), 0)
    tr = run_episode(inst, RunConfig(mode="oracle"), art)
    assert tr.outcome == "reached"
    assert all(s["status"] == "optimal" for s in tr.solves)
    # with theta = 0 the first applied segment follows its plan
    S = np.asarray(tr.states)
    cor = build_corridor(art.geom, inst.scene, plan_path(art.geom, inst.scene, inst.q_start, inst.q_goal))
    a = assign_balls(cor, np.tile(S[0, :2], (21, 1)))
    g = select_virtual_goal(cor, int(a.indices[-1]), 0.0)
    mpc = TubeMpc(MpcConfig(mode="oracle"), art.X, art.accel, None, art.consts)
    sol = mpc.solve(S[0], np.r_[cor.centers[g], 0, 0], cor.centers[a.indices], cor.radii[a.indices])
    np.testing.assert_allclose(S[:5], sol.X_bar[:5], atol=1e-6)


def test_instance_invariants(art, instance):
    assert min(scdf(art.geom, instance.scene, instance.q_start), scdf(art.geom, instance.scene, instance.q_goal)) > 0.1
    assert not straight_line_clear(art.geom, instance.scene, instance.q_start, instance.q_goal)
    assert instance.scene.n_obstacles == 6
    assert np.all((instance.scene.radii >= 0.05) & (instance.scene.radii <= 0.2))
    again = ProblemInstance.from_dict(instance.to_dict())
    np.testing.assert_array_equal(again.q_goal, instance.q_goal)


def test_theta_draw_scales_with_uncertainty(art):
    t1 = theta_from_seed(art.unc, 3)
    t2 = theta_from_seed(art.unc.with_scale(2.0), 3)
    np.testing.assert_allclose(t2, 2 * t1)
    assert art.unc.contains(t1)


@pytest.fixture(scope="module")
def flex_trace(art, instance):
    return run_episode(instance, RunConfig(), art, theta_from_seed(art.unc, 7))


def test_flexible_episode_safe_and_reaches(art, instance, flex_trace):
    tr = flex_trace
    assert tr.outcome == "reached"
    assert tr.audit == {"tube_violations": 0, "goal_regressions": 0, "infeasible_after_feasible": 0}
    assert audit_trace(tr, instance, art.geom, art.X, art.U).clean
    assert np.linalg.norm(tr.states[-1] - np.r_[instance.q_goal, 0, 0]) <= 0.01


def test_determinism(art, instance, flex_trace):
    again = run_episode(instance, RunConfig(), art, theta_from_seed(art.unc, 7))
    assert again.digest() == flex_trace.digest()
    assert SimTrace.from_dict(flex_trace.to_dict()).digest() == flex_trace.digest()


def test_audit_flags_single_corrupted_torque(art, instance, flex_trace):
    tr = SimTrace.from_dict(flex_trace.to_dict())
    k = int(np.argmax(np.max(np.abs(tr.torques) / art.U.torque_limits, axis=1)))
    tr.torques[k] = tr.torques[k] * 100
    rep = audit_trace(tr, instance, art.geom, art.X, art.U)
    assert rep.torque == 1 and rep.collision == rep.velocity == rep.configuration == 0
    assert rep.first_violation == (k, "torque")


def test_audit_catches_collision_between_samples(art):
    scene = Scene([[1.0, 0.0]], [0.1])
    # q1 sweeps through the obstacle between two clear samples
    tr = SimTrace("flexible", 1.0, np.zeros(4))
    tr.states = [np.array([-0.6, 0.0, 120.0, 0.0]), np.array([0.6, 0.0, 120.0, 0.0])]
    inst = ProblemInstance(scene, np.zeros(2), np.zeros(2), 0)
    assert np.all(scdf(art.geom, scene, np.array(tr.states)[:, :2]) > 0)
    rep = audit_trace(tr, inst, art.geom, art.X, art.U)
    assert rep.collision == 1 and rep.velocity == 2


def test_nominal_mode_fails_under_uncertainty(art, instance):
    tr = run_episode(instance, RunConfig(mode="nominal"), art, theta_from_seed(art.unc, 7))
    assert tr.outcome == "infeasible"


def test_oracle_benchmark_ratio_is_one(art):
    insts = [generate_instance(s, art.geom) for s in (1, 2)]
    rows = run_benchmark(insts, [1.0], ["oracle"], 1, {1.0: art})
    assert len(rows) == 2
    assert all(set(CSV_FIELDS) <= set(r) for r in rows)
    assert all(r["ratio_vs_oracle"] == 1.0 for r in rows)
    s = summarize(rows)
    assert s[0]["mean_ratio"] == 1.0 and s[0]["lower_2sigma"] == 1.0


def test_benchmark_requires_scales(art):
    with pytest.raises(ValueError):
        run_benchmark([], [], ["oracle"], 1, {})


def test_summary_statistics():
    rows = [{"scale": 1.0, "mode": "flexible", "outcome": "reached", "ratio_vs_oracle": r} for r in (1.0, 1.2, 1.4)]
    rows.append({"scale": 1.0, "mode": "flexible", "outcome": "timeout", "ratio_vs_oracle": float("nan")})
    (s,) = summarize(rows)
    assert s["success_rate"] == 0.75
    assert s["mean_ratio"] == pytest.approx(1.2)
    assert s["upper_2sigma"] - s["mean_ratio"] == pytest.approx(2 * np.std([1.0, 1.2, 1.4]))


def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig(n_a=0)
