"""Tube MPC as a parametrized second-order cone program.

Decision variables are the nominal states ``x_bar_0..H``, nominal
accelerations ``a_bar_0..H-1`` and, in flexible mode, the tube scalings
``delta_0..H``.  Each predicted configuration must stay in its assigned
corridor ball shrunk by the projected tube radius ``r_p * delta_i``.

Modes
-----
flexible : tube scaling is a decision variable driven by the model-error bound
rigid    : constant tube ``delta_bar`` from the worst-case disturbance box
nominal  : no tube, ``x_bar_0 = x_now``
oracle   : nominal MPC (the simulator runs it with the true model equal to the nominal one)
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from .arm import DiscreteDynamics
from .bounds import AccelSet, ErrorBoundConstants, StateBox
from .synthesis import TubeController

log = logging.getLogger(__name__)

MODES = ("flexible", "rigid", "nominal", "oracle")
TUBE_MODES = ("flexible", "rigid")


@dataclass(frozen=True)
class MpcConfig:
    """Horizon, weights and terminal tightening.

    ``Q``, ``Q_e``, ``R`` default to ``diag(10 I, 0.01 I)``, ``1e4 I`` and
    ``1e-3 I`` when left as ``None``.
    """

    H: int = 20
    Q: np.ndarray | None = None
    Q_e: np.ndarray | None = None
    R: np.ndarray | None = None
    epsilon: float = 1e-3
    mode: str = "flexible"
    tol: float = 1e-8
    retry_tol: float = 1e-6

    def __post_init__(self):
        if self.H < 2:
            raise ValueError("horizon must be at least 2")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        for name in ("Q", "Q_e", "R"):
            M = getattr(self, name)
            if M is not None:
                M = np.atleast_2d(np.asarray(M, dtype=float))
                if not np.allclose(M, M.T) or np.linalg.eigvalsh(M)[0] <= 0:
                    raise ValueError(f"{name} must be symmetric positive definite")
                object.__setattr__(self, name, M)

    def weights(self, dof: int):
        Q = self.Q if self.Q is not None else np.diag(np.r_[np.full(dof, 10.0), np.full(dof, 0.01)])
        Q_e = self.Q_e if self.Q_e is not None else 1e4 * np.eye(2 * dof)
        R = self.R if self.R is not None else 1e-3 * np.eye(dof)
        return Q, Q_e, R

    def with_mode(self, mode: str) -> "MpcConfig":
        return MpcConfig(self.H, self.Q, self.Q_e, self.R, self.epsilon, mode, self.tol, self.retry_tol)

    def to_dict(self) -> dict:
        out = {"H": self.H, "epsilon": self.epsilon, "mode": self.mode, "tol": self.tol, "retry_tol": self.retry_tol}
        for name in ("Q", "Q_e", "R"):
            M = getattr(self, name)
            out[name] = None if M is None else M.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MpcConfig":
        return cls(**d)


@dataclass(frozen=True)
class MpcProblemInputs:
    """Per-solve data: current state, virtual goal and assigned balls."""

    x_now: np.ndarray
    x_goal: np.ndarray
    ball_centers: np.ndarray
    ball_radii: np.ndarray
    ctrl: TubeController | None
    consts: ErrorBoundConstants
    accel_set: AccelSet
    X: StateBox
    dyn: DiscreteDynamics | None = None

    def __post_init__(self):
        n = self.X.dof
        object.__setattr__(self, "x_now", np.asarray(self.x_now, dtype=float))
        object.__setattr__(self, "x_goal", np.asarray(self.x_goal, dtype=float))
        object.__setattr__(self, "ball_centers", np.asarray(self.ball_centers, dtype=float))
        object.__setattr__(self, "ball_radii", np.asarray(self.ball_radii, dtype=float))
        if self.x_now.shape != (2 * n,) or self.x_goal.shape != (2 * n,):
            raise ValueError("state dimension mismatch")
        if np.any(self.x_goal[n:] != 0):
            raise ValueError("goal must be a steady state")
        if self.ball_centers.shape != (self.ball_radii.size, n):
            raise ValueError("ball centers and radii disagree")
        if self.dyn is None:
            object.__setattr__(self, "dyn", DiscreteDynamics.double_integrator(n))


@dataclass
class MpcSolution:
    X_bar: np.ndarray
    A_bar: np.ndarray
    deltas: np.ndarray
    cost: float
    status: str
    extra: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    def to_dict(self) -> dict:
        arr = lambda v: None if v is None else np.asarray(v).tolist()  # noqa: E731
        return {"X_bar": arr(self.X_bar), "A_bar": arr(self.A_bar), "deltas": arr(self.deltas),
                "cost": self.cost, "status": self.status}


def _chol_rows(M):
    """``L`` with ``|x L|^2 = x M x'`` for row vectors ``x``."""
    return np.linalg.cholesky(M)


def tube_objective(cfg: MpcConfig, ctrl, X_bar, A_bar, deltas, x_goal) -> float:
    """Cost of a trajectory, evaluated in plain numpy.

    The tube terms ``sum delta_i + delta_H / (1 - rho_tilde)`` enter only in
    flexible mode; elsewhere the tube is fixed and they are constants.
    """
    n = A_bar.shape[1]
    Q, Q_e, R = cfg.weights(n)
    H = A_bar.shape[0]
    dx = X_bar[:H] - X_bar[H]
    J = float(np.einsum("ij,jk,ik->", dx, Q, dx) + np.einsum("ij,jk,ik->", A_bar, R, A_bar))
    eg = X_bar[H] - x_goal
    J += float(eg @ Q_e @ eg)
    if cfg.mode == "flexible":
        J += float(np.sum(deltas[:H]) + deltas[H] / (1 - ctrl.rho_tilde))
    return J


class TubeMpc:
    """A compiled MPC problem; only the per-solve data are parameters."""

    def __init__(self, cfg: MpcConfig, X: StateBox, accel: AccelSet, ctrl: TubeController | None,
                 consts: ErrorBoundConstants, dyn: DiscreteDynamics | None = None):
        if cfg.mode in TUBE_MODES and ctrl is None:
            raise ValueError(f"{cfg.mode} mode needs a tube controller")
        if cfg.mode == "flexible" and not ctrl.valid:
            raise ValueError("flexible mode needs rho_tilde < 1")
        self.cfg, self.X, self.accel, self.ctrl, self.consts = cfg, X, accel, ctrl, consts
        n = X.dof
        self.dyn = dyn or DiscreteDynamics.double_integrator(n)
        H, nx = cfg.H, 2 * n
        A, B = self.dyn.A, self.dyn.B
        Q, Q_e, R = cfg.weights(n)
        A_x, b_x = X.halfplanes()
        A_u, b_u = accel.halfplanes()

        self.x_now = cp.Parameter(nx, name="x_now")
        self.x_goal = cp.Parameter(nx, name="x_goal")
        self.centers = cp.Parameter((H + 1, n), name="centers")
        self.radii = cp.Parameter(H + 1, name="radii")
        self.Xv = Xv = cp.Variable((H + 1, nx), name="x_bar")
        self.Av = Av = cp.Variable((H, n), name="a_bar")

        cons = [Xv[1:] == Xv[:-1] @ A.T + Av @ B.T, Xv[H, n:] == 0]
        dist = cp.norm(Xv[:, :n] - self.centers, 2, axis=1)
        last = np.zeros(H + 1)
        last[H] = 1.0
        stage = Xv[:H] - np.ones((H, 1)) @ cp.reshape(Xv[H], (1, nx), order="C")
        J = (cp.sum_squares(stage @ _chol_rows(Q)) + cp.sum_squares(Av @ _chol_rows(R))
             + cp.sum_squares((Xv[H] - self.x_goal) @ _chol_rows(Q_e)))

        if cfg.mode == "flexible":
            c = ctrl
            self.Dv = D = cp.Variable(H + 1, nonneg=True, name="delta")
            ta = cp.Variable(H, name="t_a")
            tv = cp.Variable(H, name="t_v")
            Ph = c.P_sqrt
            Dcol = cp.reshape(D, (H + 1, 1), order="C")
            cons += [
                cp.norm(Ph @ (Xv[0] - self.x_now), 2) <= D[0],
                D[H] >= c.delta_f,
                cp.norm(Av, 2, axis=1) <= ta,
                cp.norm(Xv[:H, n:], 2, axis=1) <= tv,
                D[1:] >= c.rho_tilde * D[:H] + c.d * (consts.a * ta + consts.b * tv + consts.c),
                Xv @ A_x.T + Dcol @ c.tightening_x[None, :] <= np.broadcast_to(b_x, (H + 1, b_x.size)),
                Av @ A_u.T + Dcol[:H] @ c.tightening_u[None, :] <= np.broadcast_to(b_u, (H, b_u.size)),
                # zero input must stay admissible for the terminal tube
                c.tightening_u * D[H] <= b_u,
                dist + c.r_p * D + c.r_p * cfg.epsilon * last <= self.radii,
            ]
            J = J + cp.sum(D[:H]) + D[H] / (1 - c.rho_tilde)
        elif cfg.mode == "rigid":
            c = ctrl
            db = c.delta_bar
            self.Dv = None
            cons += [
                cp.norm(c.P_sqrt @ (Xv[0] - self.x_now), 2) <= db,
                Xv @ A_x.T <= np.broadcast_to(b_x - c.tightening_x * db, (H + 1, b_x.size)),
                Av @ A_u.T <= np.broadcast_to(b_u - c.tightening_u * db, (H, b_u.size)),
                dist + c.r_p * db + c.r_p * cfg.epsilon * last <= self.radii,
            ]
        else:
            self.Dv = None
            cons += [
                Xv[0] == self.x_now,
                Xv @ A_x.T <= np.broadcast_to(b_x, (H + 1, b_x.size)),
                Av @ A_u.T <= np.broadcast_to(b_u, (H, b_u.size)),
                dist <= self.radii,
            ]
        self.problem = cp.Problem(cp.Minimize(J), cons)
        self._check_structure()

    def _check_structure(self):
        if not self.problem.is_dcp(dpp=True):
            raise AssertionError("MPC problem is not DPP-compliant")
        for p in self.problem.parameters():
            p.value = np.zeros(p.shape)
        dims = self.problem.get_problem_data(cp.CLARABEL)[0]["dims"]
        # only zero, nonnegative and second-order cones are allowed
        if dims.psd or dims.exp or getattr(dims, "p3d", None):
            raise AssertionError(f"MPC problem contains non-SOC cones: {dims}")

    @property
    def fixed_deltas(self) -> np.ndarray:
        H = self.cfg.H
        if self.cfg.mode == "rigid":
            return np.full(H + 1, self.ctrl.delta_bar)
        return np.zeros(H + 1)

    def _run(self, tol):
        opts = dict(tol_gap_abs=tol, tol_gap_rel=tol, tol_feas=tol, tol_ktratio=max(tol, 1e-8) * 1e-2)
        try:
            self.problem.solve(solver=cp.CLARABEL, **opts)
        except cp.SolverError as exc:
            log.debug("solver error: %s", exc)
            return "solver_error"
        st = self.problem.status
        if st == cp.OPTIMAL:
            return "optimal"
        if st in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            return "infeasible"
        return "inaccurate" if st == cp.OPTIMAL_INACCURATE else "solver_error"

    def solve(self, x_now, x_goal, centers, radii) -> MpcSolution:
        H = self.cfg.H
        self.x_now.value = np.asarray(x_now, dtype=float)
        self.x_goal.value = np.asarray(x_goal, dtype=float)
        self.centers.value = np.asarray(centers, dtype=float).reshape(H + 1, -1)
        self.radii.value = np.asarray(radii, dtype=float).reshape(H + 1)
        status = self._run(self.cfg.tol)
        if status in ("inaccurate", "solver_error"):
            status = self._run(self.cfg.retry_tol)
            status = "solver_error" if status == "inaccurate" else status
        if status != "optimal":
            return MpcSolution(None, None, None, float("nan"), status)
        Xb = np.array(self.Xv.value)
        Ab = np.array(self.Av.value)
        D = np.array(self.Dv.value) if self.Dv is not None else self.fixed_deltas
        if self.Dv is not None:
            D = np.maximum(D, 0.0)
        cost = tube_objective(self.cfg, self.ctrl, Xb, Ab, D, self.x_goal.value)
        return MpcSolution(Xb, Ab, D, cost, status, {"solver_cost": float(self.problem.value)})


_CACHE: dict = {}


def build_and_solve(cfg: MpcConfig, inp: MpcProblemInputs) -> MpcSolution:
    """Solve one MPC instance, reusing a compiled problem when possible."""
    key = (id(cfg), id(inp.ctrl), id(inp.consts), id(inp.accel_set), id(inp.X), id(inp.dyn))
    mpc = _CACHE.get(key)
    if mpc is None:
        _CACHE.clear()
        mpc = _CACHE[key] = TubeMpc(cfg, inp.X, inp.accel_set, inp.ctrl, inp.consts, inp.dyn)
    return mpc.solve(inp.x_now, inp.x_goal, inp.ball_centers, inp.ball_radii)


def shift_warm_start(sol: MpcSolution, n_a: int) -> np.ndarray:
    """Drop the first ``n_a`` states and repeat the terminal steady state."""
    H = sol.X_bar.shape[0] - 1
    if not 1 <= n_a <= H:
        raise ValueError("n_a must lie in [1, H]")
    return np.vstack([sol.X_bar[n_a:], np.repeat(sol.X_bar[-1:], n_a, axis=0)])


def aux_control(ctrl: TubeController | None, x, x_bar, a_bar) -> np.ndarray:
    """``a_bar + K (x - x_bar)``; without a controller the plan is applied open loop."""
    a_bar = np.asarray(a_bar, dtype=float)
    if ctrl is None:
        return a_bar.copy()
    return a_bar + ctrl.K @ (np.asarray(x, dtype=float) - np.asarray(x_bar, dtype=float))


def dump_replay(path, cfg: MpcConfig, inp: MpcProblemInputs, sol: MpcSolution) -> None:
    """Write the inputs and solution of one solve to JSON."""
    rec = {
        "schema_version": 1,
        "config": cfg.to_dict(),
        "inputs": {
            "x_now": inp.x_now.tolist(), "x_goal": inp.x_goal.tolist(),
            "ball_centers": inp.ball_centers.tolist(), "ball_radii": inp.ball_radii.tolist(),
            "ctrl": None if inp.ctrl is None else inp.ctrl.to_dict(),
            "consts": inp.consts.to_dict(), "accel_set": inp.accel_set.to_dict(), "X": inp.X.to_dict(),
        },
        "solution": sol.to_dict(),
    }
    with open(path, "w") as fh:
        json.dump(rec, fh)
