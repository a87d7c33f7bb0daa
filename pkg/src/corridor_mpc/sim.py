"""Closed-loop simulation of the corridor tube MPC and the benchmark protocol.

One episode plans a corridor, then alternates MPC solves with ``n_a`` steps
of the auxiliary controller applied to the true (perturbed) arm through the
nominal feedback linearization.  Every run can be audited independently of
the controller for collisions and state/torque limit violations.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .arm import ArmModel, ArmParams, DiscreteDynamics, State, UncertaintySet, feedback_linearize, step_true
from .bounds import AccelSet, ErrorBoundConstants, StateBox, TorqueSet
from .corridor import CorridorError, PlanningError, assign_balls, build_corridor, plan_path, select_virtual_goal
from .geometry import ArmGeometry, Scene, scdf, workspace_clearance
from .mpc import MpcConfig, TubeMpc, aux_control, shift_warm_start
from .synthesis import TubeController

log = logging.getLogger(__name__)

OUTCOMES = ("reached", "timeout", "infeasible", "collision", "solver_error", "planning_failed")


@dataclass(frozen=True)
class ProblemInstance:
    scene: Scene
    q_start: np.ndarray
    q_goal: np.ndarray
    seed: int

    def to_dict(self) -> dict:
        return {"scene": self.scene.to_dict(), "q_start": np.asarray(self.q_start).tolist(),
                "q_goal": np.asarray(self.q_goal).tolist(), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ProblemInstance":
        return cls(Scene.from_dict(d["scene"]), np.array(d["q_start"], dtype=float),
                   np.array(d["q_goal"], dtype=float), int(d["seed"]))


@dataclass(frozen=True)
class RunConfig:
    n_a: int = 4
    step_cap: int = 4000
    goal_radius: float = 0.01
    uncertainty_scale: float = 1.0
    mode: str = "flexible"
    clearance: float = 0.1
    corridor_step: float = 0.005
    planner_nodes: int = 50_000
    planner_seed: int = 0

    def __post_init__(self):
        if self.n_a < 1:
            raise ValueError("n_a must be at least 1")

    def replace(self, **kw) -> "RunConfig":
        d = dict(self.__dict__)
        d.update(kw)
        return RunConfig(**d)


@dataclass
class OfflineArtifacts:
    """Everything the online loop needs for one uncertainty scale."""

    arm: ArmParams
    geom: ArmGeometry
    X: StateBox
    U: TorqueSet
    accel: AccelSet
    unc: UncertaintySet
    consts: ErrorBoundConstants
    dyn: DiscreteDynamics
    flexible: TubeController | None = None
    rigid: TubeController | None = None
    notes: dict = field(default_factory=dict)

    def controller(self, mode: str) -> TubeController | None:
        if mode == "flexible":
            return self.flexible
        if mode == "rigid":
            return self.rigid
        return None


# ---------------------------------------------------------------------------
# instances


def random_scene(rng: np.random.Generator, geom: ArmGeometry, n_obstacles: int = 6,
                 radius_range=(0.05, 0.2)) -> Scene:
    """Disks whose centers lie in the annulus the arm can sweep."""
    reach = float(geom.link_lengths.sum())
    ang = rng.uniform(-np.pi, np.pi, n_obstacles)
    dist = rng.uniform(0.25 * reach, 0.9 * reach, n_obstacles)
    centers = geom.base_position + np.stack([dist * np.cos(ang), dist * np.sin(ang)], axis=1)
    bound = reach + 0.5
    return Scene(centers, rng.uniform(*radius_range, n_obstacles), np.array([[-bound, bound], [-bound, bound]]))


def straight_line_clear(geom: ArmGeometry, scene: Scene, a, b, n: int = 100) -> bool:
    t = np.linspace(0.0, 1.0, n)[:, None]
    return bool(np.all(workspace_clearance(geom, scene, a + t * (b - a)) > 0))


def generate_instance(seed: int, geom: ArmGeometry, *, clearance: float = 0.1, n_obstacles: int = 6,
                      q_limit: float = np.pi - 0.3, min_distance: float = 1.0,
                      planner_nodes: int = 300, max_scenes: int = 100) -> ProblemInstance:
    """Random scene with a start/goal pair that needs a non-trivial path.

    Pairs joined by a collision-free straight line are skipped, and so are
    pairs the planner cannot connect within ``planner_nodes``.
    """
    rng = np.random.default_rng(seed)
    for _ in range(max_scenes):
        scene = random_scene(rng, geom, n_obstacles)
        for _ in range(50):
            qs, qg = rng.uniform(-q_limit, q_limit, (2, geom.dof))
            if np.linalg.norm(qs - qg) < min_distance:
                continue
            if min(scdf(geom, scene, qs), scdf(geom, scene, qg)) < clearance + 0.01:
                continue
            if straight_line_clear(geom, scene, qs, qg):
                continue
            try:
                plan_path(geom, scene, qs, qg, clearance, max_nodes=planner_nodes, seed=seed)
            except PlanningError:
                continue
            return ProblemInstance(scene, qs, qg, seed)
    raise PlanningError(f"no instance found for seed {seed}")


def theta_from_seed(unc: UncertaintySet, theta_seed: int) -> np.ndarray:
    """Uniform draw from the scaled set; the unit draw is shared across scales."""
    u = np.random.default_rng(theta_seed).uniform(-1.0, 1.0, unc.bounds.size)
    return u * unc.bounds


# ---------------------------------------------------------------------------
# episodes


@dataclass
class SimTrace:
    mode: str
    scale: float
    theta: np.ndarray
    outcome: str = "timeout"
    steps: int = 0
    states: list = field(default_factory=list)
    accels: list = field(default_factory=list)
    torques: list = field(default_factory=list)
    solves: list = field(default_factory=list)
    audit: dict = field(default_factory=dict)
    message: str = ""

    @property
    def max_tube(self) -> float:
        return max((s["max_delta"] for s in self.solves), default=0.0)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "scale": self.scale, "theta": np.asarray(self.theta).tolist(),
            "outcome": self.outcome, "steps": self.steps,
            "states": np.asarray(self.states).tolist(), "accels": np.asarray(self.accels).tolist(),
            "torques": np.asarray(self.torques).tolist(), "solves": self.solves,
            "audit": self.audit, "message": self.message,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimTrace":
        t = cls(d["mode"], d["scale"], np.array(d["theta"]), d["outcome"], d["steps"])
        t.states = [np.array(x) for x in d["states"]]
        t.accels = [np.array(x) for x in d["accels"]]
        t.torques = [np.array(x) for x in d["torques"]]
        t.solves, t.audit, t.message = d["solves"], d["audit"], d["message"]
        return t

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def virtual_goal_tightening(mode: str, ctrl: TubeController | None, epsilon: float) -> float:
    """Terminal ball shrinkage used to pick the virtual goal, in radians."""
    if mode == "flexible":
        return ctrl.r_p * (epsilon + ctrl.delta_f)
    if mode == "rigid":
        return ctrl.r_p * (epsilon + ctrl.delta_bar)
    return 0.0


def run_episode(instance: ProblemInstance, run_cfg: RunConfig, art: OfflineArtifacts,
                theta=None, mpc_cfg: MpcConfig | None = None) -> SimTrace:
    """Execute the online loop for one instance and one parameter draw."""
    mode = run_cfg.mode
    mpc_cfg = (mpc_cfg or MpcConfig()).with_mode(mode)
    n = art.arm.dof
    theta = np.zeros(2 * n) if (theta is None or mode == "oracle") else np.asarray(theta, dtype=float)
    model = ArmModel(art.arm, theta)
    trace = SimTrace(mode, run_cfg.uncertainty_scale, theta)
    ctrl = art.controller(mode)
    if mode in ("flexible", "rigid") and (ctrl is None or (mode == "flexible" and not ctrl.valid)):
        trace.outcome, trace.message = "infeasible", "no valid tube controller at this scale"
        return trace

    # planner failures propagate to the caller
    path = plan_path(art.geom, instance.scene, instance.q_start, instance.q_goal, run_cfg.clearance,
                     max_nodes=run_cfg.planner_nodes, seed=run_cfg.planner_seed)
    corridor = build_corridor(art.geom, instance.scene, path, run_cfg.corridor_step)
    mpc = TubeMpc(mpc_cfg, art.X, art.accel, ctrl, art.consts, art.dyn)
    H = mpc_cfg.H
    tighten = virtual_goal_tightening(mode, ctrl, mpc_cfg.epsilon)
    P = ctrl.P if ctrl is not None else None

    x = np.concatenate([instance.q_start, np.zeros(n)])
    x_final = np.concatenate([instance.q_goal, np.zeros(n)])
    X_prev = np.tile(x, (H + 1, 1))
    trace.states.append(x.copy())
    audit = {"tube_violations": 0, "goal_regressions": 0, "infeasible_after_feasible": 0}
    k, last_goal, had_feasible = 0, -1, False
    while True:
        if np.linalg.norm(x - x_final) <= run_cfg.goal_radius:
            trace.outcome = "reached"
            break
        if k >= run_cfg.step_cap:
            trace.outcome = "timeout"
            break
        try:
            assign = assign_balls(corridor, X_prev[:, :n])
        except CorridorError as exc:
            trace.outcome, trace.message = "infeasible", str(exc)
            break
        goal_idx = select_virtual_goal(corridor, int(assign.indices[-1]), tighten)
        if goal_idx < last_goal:
            audit["goal_regressions"] += 1
        last_goal = goal_idx
        x_goal = np.concatenate([corridor.centers[goal_idx], np.zeros(n)])
        sol = mpc.solve(x, x_goal, corridor.centers[assign.indices], corridor.radii[assign.indices])
        trace.solves.append({
            "k": k, "status": sol.status, "cost": sol.cost, "goal_index": goal_idx,
            "max_delta": float(np.max(sol.deltas)) if sol.optimal else 0.0,
            "delta0": float(sol.deltas[0]) if sol.optimal else None,
        })
        if not sol.optimal:
            if had_feasible:
                audit["infeasible_after_feasible"] += 1
            trace.outcome = "infeasible" if sol.status == "infeasible" else "solver_error"
            trace.message = f"MPC {sol.status} at step {k}"
            break
        had_feasible = True
        for j in range(run_cfg.n_a):
            a = aux_control(ctrl, x, sol.X_bar[j], sol.A_bar[j])
            s = State(x[:n], x[n:])
            trace.torques.append(feedback_linearize(model, s, a))
            trace.accels.append(a)
            x = step_true(model, art.dyn, s, a).x
            trace.states.append(x.copy())
            k += 1
            if P is not None:
                e = x - sol.X_bar[j + 1]
                if np.sqrt(e @ P @ e) > sol.deltas[j + 1] * (1 + 1e-9) + 1e-9:
                    audit["tube_violations"] += 1
            if workspace_clearance(art.geom, instance.scene, x[:n]) < 0:
                trace.outcome = "collision"
                break
            if np.linalg.norm(x - x_final) <= run_cfg.goal_radius:
                break
        if trace.outcome == "collision":
            break
        X_prev = shift_warm_start(sol, run_cfg.n_a)
    trace.steps = k
    trace.audit = audit
    return trace


# ---------------------------------------------------------------------------
# auditing


@dataclass
class AuditReport:
    collision: int = 0
    velocity: int = 0
    configuration: int = 0
    torque: int = 0
    first_violation: tuple | None = None

    @property
    def clean(self) -> bool:
        return self.collision + self.velocity + self.configuration + self.torque == 0

    def flags(self) -> str:
        names = [k for k in ("collision", "velocity", "configuration", "torque") if getattr(self, k)]
        return "|".join(names)

    def to_dict(self) -> dict:
        return {"collision": self.collision, "velocity": self.velocity, "configuration": self.configuration,
                "torque": self.torque, "first_violation": self.first_violation}


def audit_trace(trace: SimTrace, instance: ProblemInstance, geom: ArmGeometry, X: StateBox, U: TorqueSet,
                dt: float = 0.01, substeps: int = 10, tol: float = 1e-6) -> AuditReport:
    """Check a finished trace against the exact limits, independent of the controller.

    Between samples the configuration follows the constant-acceleration arc
    implied by consecutive velocities, checked at ``substeps`` points.
    """
    rep = AuditReport()
    S = np.asarray(trace.states, dtype=float)
    if S.size == 0:
        return rep
    n = S.shape[1] // 2

    def flag(kind, idx):
        setattr(rep, kind, getattr(rep, kind) + 1)
        if rep.first_violation is None:
            rep.first_violation = (int(idx), kind)

    tau = np.linspace(0.0, dt, substeps + 1)[:, None]
    for k in range(S.shape[0]):
        q, qd = S[k, :n], S[k, n:]
        if np.any(np.abs(q) > X.q_limit + tol):
            flag("configuration", k)
        if np.any(np.abs(qd) > X.qd_limit + tol):
            flag("velocity", k)
        if k + 1 < S.shape[0]:
            acc = (S[k + 1, n:] - qd) / dt
            arc = q + tau * qd + 0.5 * tau**2 * acc
        else:
            arc = q[None]
        if np.any(workspace_clearance(geom, instance.scene, arc) < 0):
            flag("collision", k)
        if k < len(trace.torques) and not U.contains(trace.torques[k], tol):
            flag("torque", k)
    return rep


# ---------------------------------------------------------------------------
# benchmark


CSV_FIELDS = ("instance_seed", "theta_seed", "scale", "mode", "outcome", "steps",
              "ratio_vs_oracle", "max_tube", "audit_flags")


def _episode_row(args):
    instance, run_cfg, art, theta_seed, mpc_cfg = args
    theta = theta_from_seed(art.unc, theta_seed) if run_cfg.mode != "oracle" else None
    try:
        tr = run_episode(instance, run_cfg, art, theta, mpc_cfg)
    except PlanningError as exc:
        tr = SimTrace(run_cfg.mode, run_cfg.uncertainty_scale, np.zeros(0), "planning_failed", message=str(exc))
    rep = audit_trace(tr, instance, art.geom, art.X, art.U, art.dyn.dt)
    return {
        "instance_seed": instance.seed, "theta_seed": theta_seed, "scale": run_cfg.uncertainty_scale,
        "mode": run_cfg.mode, "outcome": tr.outcome, "steps": tr.steps, "max_tube": tr.max_tube,
        "audit_flags": rep.flags(),
    }


def run_benchmark(instances, scales, modes, repeats: int, artifacts: dict, run_cfg: RunConfig | None = None,
                  mpc_cfg: MpcConfig | None = None, jobs: int = 1, oracle_artifacts: OfflineArtifacts | None = None):
    """One CSV-ready row per episode, plus oracle reference rows.

    ``artifacts`` maps scale to :class:`OfflineArtifacts`. The oracle runs
    once per instance with the nominal model and ``theta = 0``; every
    episode's ``ratio_vs_oracle`` is its step count over the oracle's.
    """
    if len(scales) == 0:
        raise ValueError("no scales given")
    run_cfg = run_cfg or RunConfig()
    oracle_art = oracle_artifacts or artifacts[scales[0]]
    tasks = [(inst, run_cfg.replace(mode="oracle", uncertainty_scale=0.0), oracle_art, -1, mpc_cfg)
             for inst in instances]
    for scale in scales:
        for mode in modes:
            if mode == "oracle":
                continue
            for inst in instances:
                for r in range(repeats):
                    tasks.append((inst, run_cfg.replace(mode=mode, uncertainty_scale=scale), artifacts[scale],
                                  inst.seed * 1000 + r, mpc_cfg))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_episode_row, tasks))
    else:
        results = [_episode_row(t) for t in tasks]

    oracle = {row["instance_seed"]: row for row in results[: len(instances)]}
    rows = []
    for scale in scales:
        if "oracle" in modes:
            for row in oracle.values():
                rows.append(dict(row, scale=scale))
    rows += results[len(instances):]
    for row in rows:
        ref = oracle[row["instance_seed"]]
        ok = row["outcome"] == "reached" and ref["outcome"] == "reached" and ref["steps"] > 0
        row["ratio_vs_oracle"] = row["steps"] / ref["steps"] if ok else float("nan")
    rows.sort(key=lambda r: (r["scale"], r["mode"], r["instance_seed"], r["theta_seed"]))
    return rows


def summarize(rows):
    """Per (scale, mode): success rate, mean time ratio and its 2-sigma band."""
    out = []
    keys = sorted({(r["scale"], r["mode"]) for r in rows})
    for scale, mode in keys:
        sel = [r for r in rows if r["scale"] == scale and r["mode"] == mode]
        ratios = np.array([r["ratio_vs_oracle"] for r in sel if r["outcome"] == "reached"], dtype=float)
        ratios = ratios[np.isfinite(ratios)]
        mean = float(ratios.mean()) if ratios.size else float("nan")
        band = float(2 * ratios.std()) if ratios.size else float("nan")
        out.append({"scale": scale, "mode": mode, "episodes": len(sel),
                    "success_rate": sum(r["outcome"] == "reached" for r in sel) / len(sel),
                    "mean_ratio": mean, "lower_2sigma": mean - band, "upper_2sigma": mean + band})
    return out
